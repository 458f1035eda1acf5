//! Cross-task region contrast.
//!
//! Two task maps in a joint feature space are cut into the same regions. Each
//! region of one map is an anchor whose positive is the same region of the
//! other map and whose negatives are the other regions. The per-region NCE
//! loss uses similarity `exp(-d / tau)` and the objective is the mean over all
//! computed terms.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{CustomOp, Tape, Tensor, Var};
use crate::gaussmetric::Divergence;
use crate::maskio::{RegionMask, MIN_REGION_CELLS};
use crate::regionstats::{
    fit_region_gaussian, gaussian_backward, mean_vector_backward, pixels_backward,
    region_mean_vector, region_pixels, Covariance, CovarianceMode, RegionGaussian, RegionPixels,
    RegionVector, DEFAULT_COV_EPS,
};
use crate::task::TaskSet;
use crate::{Error, Result};

/// How a region is represented before comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Region Gaussian compared with a [`Divergence`].
    Gaussian,
    /// Region mean vector compared with squared Euclidean distance.
    Vector,
    /// Pixels at corresponding locations compared with squared Euclidean
    /// distance, one NCE term per anchor pixel.
    Pixel,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Gaussian, Strategy::Vector, Strategy::Pixel];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Gaussian => "gaussian",
            Strategy::Vector => "vector",
            Strategy::Pixel => "pixel",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "invalid strategy '{s}' (expected one of gaussian, vector, pixel)"
                ))
            })
    }
}

/// Where the negatives of an anchor come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegativeSource {
    /// Other regions of the partner map only.
    PartnerMap,
    /// Other regions of both maps.
    BothMaps,
}

impl NegativeSource {
    pub fn name(self) -> &'static str {
        match self {
            NegativeSource::PartnerMap => "partner_map",
            NegativeSource::BothMaps => "both_maps",
        }
    }
}

impl FromStr for NegativeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partner_map" => Ok(NegativeSource::PartnerMap),
            "both_maps" => Ok(NegativeSource::BothMaps),
            _ => Err(Error::InvalidArgument(format!(
                "invalid negative source '{s}' (expected one of partner_map, both_maps)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    pub strategy: Strategy,
    pub distance: Divergence,
    pub negative_source: NegativeSource,
    /// Also anchor on the second map (both directions).
    pub symmetric_anchors: bool,
    /// Pixels drawn from each negative region by the pixel strategy.
    pub max_neg_pixels: usize,
    pub min_region_cells: usize,
    pub cov_mode: CovarianceMode,
    pub eps: f64,
    /// Seed of the pixel-strategy negative draw.
    pub seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            strategy: Strategy::Gaussian,
            distance: Divergence::Wasserstein,
            negative_source: NegativeSource::PartnerMap,
            symmetric_anchors: true,
            max_neg_pixels: 16,
            min_region_cells: MIN_REGION_CELLS,
            cov_mode: CovarianceMode::Diag,
            eps: DEFAULT_COV_EPS,
            seed: 0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.max_neg_pixels == 0 || self.min_region_cells == 0 {
            return Err(Error::InvalidArgument(
                "max_neg_pixels and min_region_cells must be positive".into(),
            ));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps must be non-negative, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastReport {
    pub loss: f64,
    /// Regions that entered the contrast.
    pub regions_used: usize,
    /// Regions left out: below the size threshold, or alone without negatives.
    pub regions_skipped: usize,
    /// Per-region terms: first-map anchors by region id, then second-map
    /// anchors when anchors are symmetric.
    pub per_region: Vec<f64>,
    /// Set when fewer than two regions survive filtering.
    pub no_contrastable_regions: bool,
}

/// A region summarized for comparison.
#[derive(Clone, Debug)]
pub enum RegionRepr {
    Gaussian(RegionGaussian),
    Vector(RegionVector),
    Pixels(RegionPixels),
}

impl RegionRepr {
    pub fn region_id(&self) -> usize {
        match self {
            RegionRepr::Gaussian(g) => g.region_id,
            RegionRepr::Vector(v) => v.region_id,
            RegionRepr::Pixels(p) => p.region_id,
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            RegionRepr::Gaussian(_) => Strategy::Gaussian,
            RegionRepr::Vector(_) => Strategy::Vector,
            RegionRepr::Pixels(_) => Strategy::Pixel,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RegionRepr::Gaussian(g) => g.dim(),
            RegionRepr::Vector(v) => v.v.len(),
            RegionRepr::Pixels(p) => p.dim,
        }
    }

    /// Extracts the representation of one region of `fmap`.
    pub fn extract(
        fmap: &Tensor,
        region_id: usize,
        pixels: &[(usize, usize)],
        cfg: &ContrastConfig,
    ) -> Result<Self> {
        Ok(match cfg.strategy {
            Strategy::Gaussian => RegionRepr::Gaussian(fit_region_gaussian(
                fmap,
                region_id,
                pixels,
                cfg.cov_mode,
                cfg.eps,
                cfg.min_region_cells,
            )?),
            Strategy::Vector => RegionRepr::Vector(region_mean_vector(fmap, region_id, pixels)?),
            Strategy::Pixel => RegionRepr::Pixels(region_pixels(fmap, region_id, pixels)?),
        })
    }
}

/// NCE value and its derivatives with respect to the distances.
#[derive(Clone, Debug, PartialEq)]
pub struct NceGrad {
    pub loss: f64,
    pub d_pos: f64,
    /// Aligned with the negatives as given.
    pub d_neg: Vec<f64>,
}

/// `-ln( e^{-d₊/τ} / (e^{-d₊/τ} + Σ e^{-d₋/τ}) )` and its gradient, evaluated
/// in log space. The negatives are summed in sorted order, so the loss does not
/// depend on their order.
pub fn nce_from_distances(d_pos: f64, d_neg: &[f64], tau: f64) -> Result<NceGrad> {
    let mut out = NceGrad {
        loss: 0.0,
        d_pos: 0.0,
        d_neg: Vec::new(),
    };
    let mut scratch = Vec::new();
    let (loss, dp) = nce_core(d_pos, d_neg, tau, &mut out.d_neg, &mut scratch)?;
    out.loss = loss;
    out.d_pos = dp;
    Ok(out)
}

fn nce_core(
    d_pos: f64,
    d_neg: &[f64],
    tau: f64,
    dneg: &mut Vec<f64>,
    scratch: &mut Vec<f64>,
) -> Result<(f64, f64)> {
    if !d_pos.is_finite() || d_neg.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("contrast distance".into()));
    }
    dneg.clear();
    if d_neg.is_empty() {
        return Ok((0.0, 0.0));
    }
    // logits of the negatives relative to the positive
    scratch.clear();
    scratch.extend(d_neg.iter().map(|d| (d_pos - d) / tau));
    dneg.extend_from_slice(scratch);
    scratch.sort_unstable_by(f64::total_cmp);
    let m = scratch[scratch.len() - 1].max(0.0);
    let (loss, norm, shift) = if m == 0.0 {
        let s: f64 = scratch.iter().map(|a| a.exp()).sum();
        (s.ln_1p(), 1.0 + s, 0.0)
    } else {
        let s: f64 = (-m).exp() + scratch.iter().map(|a| (a - m).exp()).sum::<f64>();
        (m + s.ln(), s, m)
    };
    let p0 = (-shift).exp() / norm;
    for a in dneg.iter_mut() {
        *a = -((*a - shift).exp() / norm) / tau;
    }
    Ok((loss, (1.0 - p0) / tau))
}

/// NCE loss of one anchor against its positive and negatives.
pub fn nce_region_loss(
    anchor: &RegionRepr,
    positive: &RegionRepr,
    negatives: &[&RegionRepr],
    cfg: &ContrastConfig,
) -> Result<f64> {
    Ok(nce_region_grad(anchor, positive, negatives, cfg)?.loss)
}

/// Gradient with respect to a representation's parameters (pixel features
/// are row-major `n×C`).
#[derive(Clone, Debug)]
enum ReprGrad {
    Gaussian { dmu: Vec<f64>, dsigma: Covariance },
    Vector(Vec<f64>),
    Pixels(Vec<f64>),
}

impl ReprGrad {
    fn zeros_for(r: &RegionRepr) -> Self {
        match r {
            RegionRepr::Gaussian(g) => ReprGrad::Gaussian {
                dmu: vec![0.0; g.dim()],
                dsigma: g.sigma.zeros_like(),
            },
            RegionRepr::Vector(v) => ReprGrad::Vector(vec![0.0; v.v.len()]),
            RegionRepr::Pixels(p) => ReprGrad::Pixels(vec![0.0; p.features.len()]),
        }
    }

    fn add_scaled(&mut self, other: &ReprGrad, s: f64) {
        match (self, other) {
            (
                ReprGrad::Gaussian { dmu, dsigma },
                ReprGrad::Gaussian {
                    dmu: om,
                    dsigma: os,
                },
            ) => {
                axpy(dmu, om, s);
                dsigma.add_scaled(os, s);
            }
            (ReprGrad::Vector(a), ReprGrad::Vector(b))
            | (ReprGrad::Pixels(a), ReprGrad::Pixels(b)) => axpy(a, b, s),
            _ => unreachable!("representation gradients of different strategies"),
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], s: f64) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += s * b;
    }
}

struct RegionTermGrad {
    loss: f64,
    anchor: ReprGrad,
    positive: ReprGrad,
    negatives: Vec<ReprGrad>,
}

fn check_reprs(anchor: &RegionRepr, others: &[&RegionRepr]) -> Result<()> {
    for r in others {
        if r.strategy() != anchor.strategy() {
            return Err(Error::InvalidArgument(format!(
                "mixed representations: {} and {}",
                anchor.strategy(),
                r.strategy()
            )));
        }
        if r.dim() != anchor.dim() {
            return Err(Error::ShapeMismatch {
                op: "nce_region_loss",
                left: vec![anchor.dim()],
                right: vec![r.dim()],
            });
        }
    }
    Ok(())
}

fn nce_region_grad(
    anchor: &RegionRepr,
    positive: &RegionRepr,
    negatives: &[&RegionRepr],
    cfg: &ContrastConfig,
) -> Result<RegionTermGrad> {
    cfg.validate()?;
    check_reprs(anchor, &[positive])?;
    check_reprs(anchor, negatives)?;
    match (anchor, positive) {
        (RegionRepr::Gaussian(a), RegionRepr::Gaussian(p)) => {
            let (d_pos, gp) = cfg.distance.eval_with_grad(a, p)?;
            let mut d_neg = Vec::with_capacity(negatives.len());
            let mut gneg = Vec::with_capacity(negatives.len());
            for n in negatives {
                let RegionRepr::Gaussian(n) = n else {
                    unreachable!()
                };
                let (d, g) = cfg.distance.eval_with_grad(a, n)?;
                d_neg.push(d);
                gneg.push(g);
            }
            let nce = nce_from_distances(d_pos, &d_neg, cfg.tau)?;
            let mut dmu = vec![0.0; a.dim()];
            let mut dsigma = a.sigma.zeros_like();
            axpy(&mut dmu, &gp.dmu1, nce.d_pos);
            dsigma.add_scaled(&gp.dsigma1, nce.d_pos);
            let mut negatives = Vec::with_capacity(gneg.len());
            for (g, &w) in gneg.iter().zip(&nce.d_neg) {
                axpy(&mut dmu, &g.dmu1, w);
                dsigma.add_scaled(&g.dsigma1, w);
                let mut dm2 = vec![0.0; a.dim()];
                axpy(&mut dm2, &g.dmu2, w);
                let mut ds2 = g.dsigma2.zeros_like();
                ds2.add_scaled(&g.dsigma2, w);
                negatives.push(ReprGrad::Gaussian {
                    dmu: dm2,
                    dsigma: ds2,
                });
            }
            let mut pm = vec![0.0; a.dim()];
            axpy(&mut pm, &gp.dmu2, nce.d_pos);
            let mut ps = gp.dsigma2.zeros_like();
            ps.add_scaled(&gp.dsigma2, nce.d_pos);
            Ok(RegionTermGrad {
                loss: nce.loss,
                anchor: ReprGrad::Gaussian { dmu, dsigma },
                positive: ReprGrad::Gaussian {
                    dmu: pm,
                    dsigma: ps,
                },
                negatives,
            })
        }
        (RegionRepr::Vector(a), RegionRepr::Vector(p)) => {
            let keys: Vec<&[f64]> = negatives
                .iter()
                .map(|n| match n {
                    RegionRepr::Vector(v) => v.v.as_slice(),
                    _ => unreachable!(),
                })
                .collect();
            let d_neg: Vec<f64> = keys.iter().map(|k| sq_dist(&a.v, k)).collect();
            let nce = nce_from_distances(sq_dist(&a.v, &p.v), &d_neg, cfg.tau)?;
            let mut da = vec![0.0; a.v.len()];
            let mut dp = vec![0.0; a.v.len()];
            for ((x, y), (ga, gp)) in a.v.iter().zip(&p.v).zip(da.iter_mut().zip(dp.iter_mut())) {
                *ga += 2.0 * nce.d_pos * (x - y);
                *gp -= 2.0 * nce.d_pos * (x - y);
            }
            let mut negs = Vec::with_capacity(keys.len());
            for (k, &w) in keys.iter().zip(&nce.d_neg) {
                let mut dk = vec![0.0; k.len()];
                for ((x, y), (ga, gk)) in
                    a.v.iter()
                        .zip(k.iter())
                        .zip(da.iter_mut().zip(dk.iter_mut()))
                {
                    *ga += 2.0 * w * (x - y);
                    *gk -= 2.0 * w * (x - y);
                }
                negs.push(ReprGrad::Vector(dk));
            }
            Ok(RegionTermGrad {
                loss: nce.loss,
                anchor: ReprGrad::Vector(da),
                positive: ReprGrad::Vector(dp),
                negatives: negs,
            })
        }
        (RegionRepr::Pixels(a), RegionRepr::Pixels(p)) => pixel_term(a, p, negatives, cfg),
        _ => unreachable!("strategies checked above"),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the pixels drawn from negative region `neg_id` for anchor region
/// `anchor_id`, ascending. The draw depends only on the seed and the two ids.
pub fn negative_pixel_sample(
    n: usize,
    cap: usize,
    seed: u64,
    anchor_id: usize,
    neg_id: usize,
) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((anchor_id as u64) << 32) | neg_id as u64);
    let mut idx = sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

fn pixel_term(
    a: &RegionPixels,
    p: &RegionPixels,
    negatives: &[&RegionRepr],
    cfg: &ContrastConfig,
) -> Result<RegionTermGrad> {
    if a.coords != p.coords {
        return Err(Error::InvalidArgument(format!(
            "pixel contrast needs the positive at the anchor's locations (region {})",
            a.region_id
        )));
    }
    let c = a.dim;
    let negs: Vec<&RegionPixels> = negatives
        .iter()
        .map(|n| match n {
            RegionRepr::Pixels(px) => px,
            _ => unreachable!(),
        })
        .collect();
    // (negative index, pixel index) of every pooled negative pixel
    let mut pool = Vec::new();
    for (k, n) in negs.iter().enumerate() {
        for i in negative_pixel_sample(
            n.len(),
            cfg.max_neg_pixels,
            cfg.seed,
            a.region_id,
            n.region_id,
        ) {
            pool.push((k, i));
        }
    }
    let n_anchor = a.len();
    let inv_n = 1.0 / n_anchor as f64;
    let mut da = vec![0.0; a.features.len()];
    let mut dp = vec![0.0; p.features.len()];
    let mut dn: Vec<Vec<f64>> = negs.iter().map(|n| vec![0.0; n.features.len()]).collect();
    let mut d_neg = Vec::with_capacity(pool.len());
    let (mut dneg, mut scratch) = (Vec::new(), Vec::new());
    let mut loss = 0.0;
    for i in 0..n_anchor {
        let x = a.feature(i);
        let y = p.feature(i);
        d_neg.clear();
        d_neg.extend(pool.iter().map(|&(k, j)| sq_dist(x, negs[k].feature(j))));
        let (l, dpos) = nce_core(sq_dist(x, y), &d_neg, cfg.tau, &mut dneg, &mut scratch)?;
        loss += l;
        let gx = &mut da[i * c..(i + 1) * c];
        let gy = &mut dp[i * c..(i + 1) * c];
        for ch in 0..c {
            let t = 2.0 * inv_n * dpos * (x[ch] - y[ch]);
            gx[ch] += t;
            gy[ch] -= t;
        }
        for (&(k, j), &w) in pool.iter().zip(&dneg) {
            let z = negs[k].feature(j);
            let gz = &mut dn[k][j * c..(j + 1) * c];
            for ch in 0..c {
                let t = 2.0 * inv_n * w * (x[ch] - z[ch]);
                gx[ch] += t;
                gz[ch] -= t;
            }
        }
    }
    Ok(RegionTermGrad {
        loss: if pool.is_empty() { 0.0 } else { loss * inv_n },
        anchor: ReprGrad::Pixels(da),
        positive: ReprGrad::Pixels(dp),
        negatives: dn.into_iter().map(ReprGrad::Pixels).collect(),
    })
}

/// Loss, report and gradients of [`cross_task_region_contrast`] with respect
/// to both maps.
#[derive(Clone, Debug)]
pub struct ContrastOutput {
    pub loss: f64,
    pub report: ContrastReport,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Contrasts corresponding regions of `map_a` and `map_b` under `mask`, which
/// must already be at the maps' resolution.
pub fn cross_task_region_contrast(
    map_a: &Tensor,
    map_b: &Tensor,
    mask: &RegionMask,
    cfg: &ContrastConfig,
) -> Result<(f64, ContrastReport)> {
    let out = cross_task_region_contrast_grad(map_a, map_b, mask, cfg)?;
    Ok((out.loss, out.report))
}

pub fn cross_task_region_contrast_grad(
    map_a: &Tensor,
    map_b: &Tensor,
    mask: &RegionMask,
    cfg: &ContrastConfig,
) -> Result<ContrastOutput> {
    cfg.validate()?;
    map_a.same_shape(map_b, "cross_task_region_contrast")?;
    let (_, h, w) = map_a.chw()?;
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::ShapeMismatch {
            op: "cross_task_region_contrast",
            left: vec![h, w],
            right: vec![mask.height(), mask.width()],
        });
    }
    let mut out = ContrastOutput {
        loss: 0.0,
        report: ContrastReport::default(),
        grad_a: vec![0.0; map_a.len()],
        grad_b: vec![0.0; map_b.len()],
    };
    let ids: Vec<usize> = (0..mask.num_regions())
        .filter(|&id| mask.region(id).len() >= cfg.min_region_cells)
        .collect();
    let too_small = mask.num_regions() - ids.len();
    if ids.len() < 2 {
        out.report.regions_skipped = mask.num_regions();
        out.report.no_contrastable_regions = true;
        return Ok(out);
    }
    out.report.regions_used = ids.len();
    out.report.regions_skipped = too_small;

    let extract = |map: &Tensor| -> Result<Vec<RegionRepr>> {
        ids.iter()
            .map(|&id| RegionRepr::extract(map, id, mask.region(id), cfg))
            .collect()
    };
    let reps = [extract(map_a)?, extract(map_b)?];
    let mut acc: [Vec<ReprGrad>; 2] = [
        reps[0].iter().map(ReprGrad::zeros_for).collect(),
        reps[1].iter().map(ReprGrad::zeros_for).collect(),
    ];
    let directions: &[(usize, usize)] = if cfg.symmetric_anchors {
        &[(0, 1), (1, 0)]
    } else {
        &[(0, 1)]
    };
    let m = ids.len();
    let mut terms = Vec::with_capacity(directions.len() * m);
    for &(src, dst) in directions {
        for i in 0..m {
            // (map, region slot) of each negative
            let mut neg_slots: Vec<(usize, usize)> =
                (0..m).filter(|&j| j != i).map(|j| (dst, j)).collect();
            if cfg.negative_source == NegativeSource::BothMaps {
                neg_slots.extend((0..m).filter(|&j| j != i).map(|j| (src, j)));
            }
            let negs: Vec<&RegionRepr> = neg_slots.iter().map(|&(s, j)| &reps[s][j]).collect();
            let term = nce_region_grad(&reps[src][i], &reps[dst][i], &negs, cfg)?;
            terms.push(term.loss);
            acc[src][i].add_scaled(&term.anchor, 1.0);
            acc[dst][i].add_scaled(&term.positive, 1.0);
            for (&(s, j), g) in neg_slots.iter().zip(&term.negatives) {
                acc[s][j].add_scaled(g, 1.0);
            }
        }
    }
    let scale = 1.0 / terms.len() as f64;
    out.loss = terms.iter().sum::<f64>() * scale;
    out.report.loss = out.loss;
    out.report.per_region = terms;

    for (side, (map, grad)) in [(map_a, &mut out.grad_a), (map_b, &mut out.grad_b)]
        .into_iter()
        .enumerate()
    {
        for (slot, &id) in ids.iter().enumerate() {
            let pixels = mask.region(id);
            match (&reps[side][slot], &acc[side][slot]) {
                (RegionRepr::Gaussian(g), ReprGrad::Gaussian { dmu, dsigma }) => {
                    let dmu: Vec<f64> = dmu.iter().map(|v| v * scale).collect();
                    let mut ds = dsigma.zeros_like();
                    ds.add_scaled(dsigma, scale);
                    gaussian_backward(map, pixels, g, &dmu, &ds, grad)?;
                }
                (RegionRepr::Vector(_), ReprGrad::Vector(dv)) => {
                    let dv: Vec<f64> = dv.iter().map(|v| v * scale).collect();
                    mean_vector_backward(map, pixels, &dv, grad)?;
                }
                (RegionRepr::Pixels(px), ReprGrad::Pixels(df)) => {
                    let df: Vec<f64> = df.iter().map(|v| v * scale).collect();
                    pixels_backward(map, px, &df, grad)?;
                }
                _ => unreachable!(),
            }
        }
    }
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("contrast loss".into()));
    }
    Ok(out)
}

struct ContrastOp {
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

impl CustomOp for ContrastOp {
    fn name(&self) -> &'static str {
        "region_contrast"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let g = grad_out[0];
        let scaled = |v: &[f64]| v.iter().map(|x| x * g).collect::<Vec<_>>();
        Ok(vec![
            needs[0].then(|| scaled(&self.grad_a)),
            needs[1].then(|| scaled(&self.grad_b)),
        ])
    }
}

/// Records the contrast of two maps on `tape` as a scalar node.
pub fn contrast_on_tape(
    tape: &mut Tape,
    map_a: Var,
    map_b: Var,
    mask: &RegionMask,
    cfg: &ContrastConfig,
) -> Result<(Var, ContrastReport)> {
    let out = cross_task_region_contrast_grad(tape.value(map_a), tape.value(map_b), mask, cfg)?;
    let op = ContrastOp {
        grad_a: out.grad_a,
        grad_b: out.grad_b,
    };
    let v = tape.custom(&[map_a, map_b], Tensor::scalar(out.loss), Box::new(op))?;
    Ok((v, out.report))
}

/// Which task pairs are contrasted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairMode {
    /// Labeled source tasks against unlabeled target tasks.
    Partial,
    /// Every ordered pair of distinct tasks.
    Full,
}

/// `(source, target)` task-index pairs: the label of `source` is contrasted
/// against the prediction of `target`. Ordered by source, then target.
pub fn pair_schedule(
    labeled: TaskSet,
    unlabeled: TaskSet,
    mode: PairMode,
) -> Result<Vec<(usize, usize)>> {
    if !labeled.intersection(unlabeled).is_empty() {
        return Err(Error::InvalidArgument(
            "a task cannot be both labeled and unlabeled".into(),
        ));
    }
    Ok(match mode {
        PairMode::Partial => {
            if labeled.is_empty() {
                return Err(Error::InvalidArgument(
                    "partial supervision needs at least one labeled task".into(),
                ));
            }
            labeled
                .iter()
                .flat_map(|s| unlabeled.iter().map(move |t| (s, t)))
                .collect()
        }
        PairMode::Full => {
            let all = labeled.union(unlabeled);
            all.iter()
                .flat_map(|s| all.iter().filter(move |&t| t != s).map(move |t| (s, t)))
                .collect()
        }
    })
}
