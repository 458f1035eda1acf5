//! Procedural scenes of colored shapes with consistent segmentation, depth
//! and normal ground truth, oracle region masks, label assignment, and the
//! on-disk dataset layout.
//!
//! Every region (one per shape plus the background) has one class, a planar
//! depth `d = a·x + b·y + c` over normalized image coordinates, and the
//! constant normal `(-a, -b, 1) / ‖·‖`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::maskio::{self, RegionMask};
use crate::par::Executor;
use crate::task::{Task, TaskSet};
use crate::{Error, Result};

/// Pixels a shape must keep after occlusion.
const MIN_VISIBLE: usize = 24;
const PLANE_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub color_noise: f64,
    /// Weight of the Lambert and depth shading of the base colors (0 = flat).
    pub shading: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 64,
            num_classes: 5,
            min_shapes: 3,
            max_shapes: 6,
            color_noise: 0.05,
            shading: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 2 != 0 || self.width % 2 != 0 {
            return bad(format!(
                "scene extents must be positive and even, got {}×{}",
                self.height, self.width
            ));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!(
                "scene extents must be at least 8×8, got {}×{}",
                self.height, self.width
            ));
        }
        if !(2..255).contains(&self.num_classes) {
            return bad(format!(
                "num_classes must be in 2..=254, got {}",
                self.num_classes
            ));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 64 {
            return bad(format!(
                "invalid shape count range {}..={}",
                self.min_shapes, self.max_shapes
            ));
        }
        if !(self.color_noise >= 0.0 && self.color_noise.is_finite()) {
            return bad(format!(
                "color_noise must be non-negative, got {}",
                self.color_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.shading) {
            return bad(format!("shading must be in [0, 1], got {}", self.shading));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    /// `H×W` classes; background is class 0.
    pub seg: Vec<u16>,
    /// `1×H×W` in `[0, 1]`.
    pub depth: Tensor,
    /// `3×H×W` unit vectors.
    pub normals: Tensor,
    pub regions: RegionMask,
    pub labeled: TaskSet,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.regions.height()
    }

    pub fn width(&self) -> usize {
        self.regions.width()
    }

    /// Checks the per-region coupling of class, depth plane and normal.
    /// `tol` bounds the plane residual and the normal length error.
    pub fn check_invariants(&self, num_classes: usize, tol: f64) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let hw = h * w;
        let fail = |m: String| Err(Error::Data(m));
        if self.image.shape() != [3, h, w]
            || self.depth.shape() != [1, h, w]
            || self.normals.shape() != [3, h, w]
        {
            return fail("scene tensors do not match the mask extents".into());
        }
        if self.seg.len() != hw {
            return fail("segmentation size mismatch".into());
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("image value outside [0, 1]".into());
        }
        if self.depth.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("depth outside [0, 1]".into());
        }
        if self.labeled.is_empty() || self.labeled.len() > Task::ALL.len() {
            return fail(format!(
                "labeled task count {} outside 1..=3",
                self.labeled.len()
            ));
        }
        let n = self.normals.data();
        let d = self.depth.data();
        for (id, pixels) in self.regions.regions().iter().enumerate() {
            let &(r0, c0) = pixels
                .first()
                .ok_or_else(|| Error::Data(format!("region {id} is empty")))?;
            let p0 = r0 * w + c0;
            let class = self.seg[p0];
            if class as usize >= num_classes {
                return fail(format!("class {class} out of range"));
            }
            let nv = [n[p0], n[hw + p0], n[2 * hw + p0]];
            let len = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
            if (len - 1.0).abs() > tol || nv[2] <= 0.0 {
                return fail(format!(
                    "region {id}: normal {nv:?} is not a unit upward vector"
                ));
            }
            let (a, b) = (-nv[0] / nv[2], -nv[1] / nv[2]);
            let (x0, y0) = norm_coords(r0, c0, h, w);
            let c = d[p0] - a * x0 - b * y0;
            for &(r, col) in pixels {
                let p = r * w + col;
                if self.seg[p] != class {
                    return fail(format!(
                        "region {id} mixes classes {class} and {}",
                        self.seg[p]
                    ));
                }
                if (0..3).any(|k| n[k * hw + p] != nv[k]) {
                    return fail(format!("region {id} has a non-constant normal"));
                }
                let (x, y) = norm_coords(r, col, h, w);
                if (d[p] - (a * x + b * y + c)).abs() > tol {
                    return fail(format!("region {id}: depth is not planar at ({r}, {col})"));
                }
            }
        }
        Ok(())
    }
}

/// Pixel center in `[0, 1]²`: `x` along the width, `y` along the height.
fn norm_coords(r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
    ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64)
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    class: u16,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Shape {
    fn covers(&self, r: usize, c: usize) -> bool {
        let dy = (r as f64 + 0.5 - self.cy) / self.ry;
        let dx = (c as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// `(a, b, c)` with `a·x + b·y + c ∈ [0, 1]` over the unit square.
fn draw_plane(rng: &mut impl Rng) -> (f64, f64, f64) {
    for _ in 0..PLANE_RETRIES {
        let a: f64 = rng.gen_range(-0.5..0.5);
        let b: f64 = rng.gen_range(-0.5..0.5);
        let lo = a.min(0.0) + b.min(0.0);
        let hi = a.max(0.0) + b.max(0.0);
        if hi - lo <= 1.0 {
            let c = rng.gen_range(-lo..=1.0 - hi);
            return (a, b, c);
        }
    }
    (0.0, 0.0, 0.5)
}

/// Base color of a class: gray background, evenly spaced hues otherwise.
fn palette(class: u16, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.4, 0.4, 0.4];
    }
    let hue = (class as f64 - 1.0) / (num_classes as f64 - 1.0) * 6.0;
    let (s, v) = (0.75, 0.9);
    let f = hue - hue.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match hue.floor() as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const LIGHT: [f64; 3] = [0.3, -0.4, 0.866_025_403_784_438_6];

pub fn generate_scene(cfg: &WorldConfig, rng: &mut impl Rng) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    // layout: redraw until every shape and the background stay visible
    let (shapes, owner) = loop {
        let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
        let shapes: Vec<Shape> = (0..count)
            .map(|_| Shape {
                kind: if rng.gen_bool(0.5) {
                    ShapeKind::Rect
                } else {
                    ShapeKind::Ellipse
                },
                class: rng.gen_range(1..cfg.num_classes as u16),
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                ry: rng.gen_range(0.12..0.3) * h as f64,
                rx: rng.gen_range(0.12..0.3) * w as f64,
            })
            .collect();
        // 0 = background, k = shape k-1; later shapes paint over earlier ones
        let mut owner = vec![0u16; hw];
        for (k, s) in shapes.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    if s.covers(r, c) {
                        owner[r * w + c] = k as u16 + 1;
                    }
                }
            }
        }
        let mut counts = vec![0usize; count + 1];
        owner.iter().for_each(|&o| counts[o as usize] += 1);
        if counts.iter().all(|&n| n >= MIN_VISIBLE) {
            break (shapes, owner);
        }
    };
    let planes: Vec<(f64, f64, f64)> = (0..=shapes.len()).map(|_| draw_plane(rng)).collect();
    let noise = Normal::new(0.0, cfg.color_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut seg = vec![0u16; hw];
    let mut depth = vec![0.0; hw];
    let mut normals = vec![0.0; 3 * hw];
    let mut image = vec![0.0; 3 * hw];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let o = owner[p] as usize;
            let class = if o == 0 { 0 } else { shapes[o - 1].class };
            let (a, b, c0) = planes[o];
            let (x, y) = norm_coords(r, c, h, w);
            let d = (a * x + b * y + c0).clamp(0.0, 1.0);
            let len = (a * a + b * b + 1.0).sqrt();
            let n = [-a / len, -b / len, 1.0 / len];
            seg[p] = class;
            depth[p] = d;
            for k in 0..3 {
                normals[k * hw + p] = n[k];
            }
            let lambert: f64 = (0..3).map(|k| n[k] * LIGHT[k]).sum();
            let shade = 1.0 - cfg.shading + cfg.shading * lambert * (1.25 - 0.5 * d);
            let base = palette(class, cfg.num_classes);
            for k in 0..3 {
                image[k * hw + p] = (base[k] * shade + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![3, h, w], image)?,
        seg,
        depth: Tensor::new(vec![1, h, w], depth)?,
        normals: Tensor::new(vec![3, h, w], normals)?,
        regions: RegionMask::from_raw(h, w, &owner)?,
        labeled: TaskSet::first(Task::ALL.len()),
    })
}

/// Generator for scene `index`: the config seed with its own stream.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `count` scenes, scene `i` drawn from [`scene_rng`]`(cfg.seed, i)`.
pub fn generate_dataset(cfg: &WorldConfig, count: usize, exec: &Executor) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..count).collect();
    exec.map(&idx, |_, &i| {
        generate_scene(cfg, &mut scene_rng(cfg.seed, i))
    })
    .into_iter()
    .collect()
}

/// Partial-label protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelSetting {
    /// Exactly one uniformly chosen task per scene.
    OneLabel,
    /// `P` uniform in `1..K`, then a uniform `P`-subset.
    Random,
    /// Every task labeled.
    Full,
}

impl LabelSetting {
    pub const ALL: [LabelSetting; 3] = [
        LabelSetting::OneLabel,
        LabelSetting::Random,
        LabelSetting::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelSetting::OneLabel => "onelabel",
            LabelSetting::Random => "random",
            LabelSetting::Full => "full",
        }
    }
}

impl fmt::Display for LabelSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelSetting::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "invalid setting '{s}' (expected one of onelabel, random, full)"
                ))
            })
    }
}

/// Labeled-task sets for `count` scenes over `k` tasks.
pub fn draw_label_sets(
    count: usize,
    setting: LabelSetting,
    k: usize,
    seed: u64,
) -> Result<Vec<TaskSet>> {
    if !(2..=8).contains(&k) {
        return Err(Error::InvalidArgument(format!("need 2..=8 tasks, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| match setting {
            LabelSetting::OneLabel => TaskSet::empty().with(rng.gen_range(0..k)),
            LabelSetting::Random => {
                let p = rng.gen_range(1..k);
                sample(&mut rng, k, p).into_iter().collect()
            }
            LabelSetting::Full => TaskSet::first(k),
        })
        .collect())
}

pub fn assign_labels(scenes: &mut [Scene], setting: LabelSetting, seed: u64) -> Result<()> {
    let sets = draw_label_sets(scenes.len(), setting, Task::ALL.len(), seed)?;
    for (s, l) in scenes.iter_mut().zip(sets) {
        s.labeled = l;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub scenes: Vec<Scene>,
}

pub fn scene_dir(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("scene_{index:05}"))
}

fn manifest_text(cfg: &WorldConfig, count: usize) -> String {
    format!(
        "count = {count}\nheight = {}\nwidth = {}\nnum_classes = {}\nmin_shapes = {}\nmax_shapes = {}\ncolor_noise = {}\nshading = {}\nseed = {}\n",
        cfg.height, cfg.width, cfg.num_classes, cfg.min_shapes, cfg.max_shapes, cfg.color_noise, cfg.shading, cfg.seed
    )
}

fn labels_text(labeled: TaskSet) -> String {
    let names: Vec<&str> = labeled.tasks().map(Task::name).collect();
    format!("labeled={}\n", names.join(","))
}

/// Writes `manifest.txt` and one `scene_NNNNN/` directory per scene.
pub fn write_dataset(scenes: &[Scene], cfg: &WorldConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        let sd = scene_dir(dir, i);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        maskio::store_image_ppm(&s.image, sd.join("image.ppm"))?;
        maskio::store_gray8_pgm(s.height(), s.width(), &s.seg, sd.join("seg.pgm"))?;
        maskio::store_region_mask(&s.regions, sd.join("regions.pgm"))?;
        maskio::store_scalar_pfm(&s.depth, sd.join("depth.pfm"))?;
        maskio::store_vec3_pfm(&s.normals, sd.join("normals.pfm"))?;
        let lp = sd.join("labels.txt");
        fs::write(&lp, labels_text(s.labeled)).map_err(|e| Error::io(&lp, e))?;
    }
    // written last so a partial directory is never mistaken for a dataset
    let mp = dir.join("manifest.txt");
    fs::write(&mp, manifest_text(cfg, scenes.len())).map_err(|e| Error::io(&mp, e))
}

fn parse_manifest(path: &Path) -> Result<(WorldConfig, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = WorldConfig::default();
    let mut count = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("expected 'key = value', got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = |_| Error::format(path, format!("bad value for {k}: '{v}'"));
        match k {
            "count" => count = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "height" => {
                cfg.height = v
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "width" => {
                cfg.width = v
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "num_classes" => {
                cfg.num_classes = v
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "min_shapes" => {
                cfg.min_shapes = v
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "max_shapes" => {
                cfg.max_shapes = v
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "color_noise" => {
                cfg.color_noise = v
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
            "shading" => {
                cfg.shading = v
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
            "seed" => {
                cfg.seed = v
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            _ => return Err(Error::format(path, format!("unknown manifest key '{k}'"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "missing count"))?;
    cfg.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((cfg, count))
}

fn parse_labels(path: &Path) -> Result<TaskSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let list = text
        .trim()
        .strip_prefix("labeled=")
        .ok_or_else(|| Error::format(path, "expected 'labeled=<tasks>'"))?;
    let mut set = TaskSet::empty();
    for name in list.split(',').filter(|s| !s.is_empty()) {
        let t = Task::from_name(name.trim()).map_err(|e| Error::format(path, e.to_string()))?;
        set = set.with(t.index());
    }
    if set.is_empty() {
        return Err(Error::format(path, "no labeled task"));
    }
    Ok(set)
}

fn expect_extents(path: &Path, got: (usize, usize), cfg: &WorldConfig) -> Result<()> {
    if got != (cfg.height, cfg.width) {
        return Err(Error::format(
            path,
            format!(
                "extents {}×{} differ from the manifest's {}×{}",
                got.0, got.1, cfg.height, cfg.width
            ),
        ));
    }
    Ok(())
}

pub fn read_scene(dir: &Path, cfg: &WorldConfig) -> Result<Scene> {
    let p = |f: &str| dir.join(f);
    let image = maskio::load_image_ppm(p("image.ppm"))?;
    let (_, h, w) = image.chw()?;
    expect_extents(&p("image.ppm"), (h, w), cfg)?;
    let (sh, sw, seg) = maskio::load_gray8_pgm(p("seg.pgm"))?;
    expect_extents(&p("seg.pgm"), (sh, sw), cfg)?;
    if let Some(&c) = seg.iter().find(|&&c| c as usize >= cfg.num_classes) {
        return Err(Error::format(
            p("seg.pgm"),
            format!("class {c} outside 0..{}", cfg.num_classes),
        ));
    }
    let regions = maskio::load_region_mask(p("regions.pgm"))?;
    expect_extents(&p("regions.pgm"), (regions.height(), regions.width()), cfg)?;
    let depth = maskio::load_scalar_pfm(p("depth.pfm"))?;
    expect_extents(&p("depth.pfm"), (depth.shape()[1], depth.shape()[2]), cfg)?;
    let normals = maskio::load_vec3_pfm(p("normals.pfm"))?;
    expect_extents(
        &p("normals.pfm"),
        (normals.shape()[1], normals.shape()[2]),
        cfg,
    )?;
    let labeled = parse_labels(&p("labels.txt"))?;
    Ok(Scene {
        image,
        seg,
        depth,
        normals,
        regions,
        labeled,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (config, count) = parse_manifest(&dir.join("manifest.txt"))?;
    let scenes = (0..count)
        .map(|i| read_scene(&scene_dir(dir, i), &config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config, scenes })
}
