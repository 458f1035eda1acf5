//! Region masks in the grayscale-ID convention (each pixel holds the ID of
//! the region it belongs to), patch grids, and image file I/O.

mod formats;

pub use formats::{
    load_gray8_pgm, load_image_ppm, load_region_mask, load_scalar_pfm, load_vec3_pfm,
    store_gray8_pgm, store_image_ppm, store_region_mask, store_scalar_pfm, store_vec3_pfm,
};

use crate::{Error, Result};

/// Sentinel for pixels that belong to no region.
pub const IGNORE_ID: u16 = u16::MAX;

/// Regions smaller than this at feature resolution are not contrasted.
pub const MIN_REGION_CELLS: usize = 4;

/// An H×W grid of canonical region IDs.
///
/// Non-ignore IDs are exactly `0..num_regions()`, numbered by first
/// appearance in raster order, and every region is non-empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    ids: Vec<u16>,
    regions: Vec<Vec<(usize, usize)>>,
}

impl RegionMask {
    /// Canonicalizes a raw ID grid. Fails if every pixel is [`IGNORE_ID`].
    pub fn from_raw(height: usize, width: usize, raw: &[u16]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask extents must be positive, got {height}×{width}"
            )));
        }
        if raw.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask of {height}×{width} needs {} ids, got {}",
                height * width,
                raw.len()
            )));
        }
        let mut relabel = vec![IGNORE_ID; 1 << 16];
        let mut next: u16 = 0;
        let mut ids = Vec::with_capacity(raw.len());
        let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();
        for (p, &r) in raw.iter().enumerate() {
            if r == IGNORE_ID {
                ids.push(IGNORE_ID);
                continue;
            }
            let slot = &mut relabel[r as usize];
            if *slot == IGNORE_ID {
                *slot = next;
                next += 1;
                regions.push(Vec::new());
            }
            ids.push(*slot);
            regions[*slot as usize].push((p / width, p % width));
        }
        if regions.is_empty() {
            return Err(Error::Data(
                "no regions: every pixel carries the ignore id".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            ids,
            regions,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn id_at(&self, row: usize, col: usize) -> u16 {
        self.ids[row * self.width + col]
    }

    /// Number of regions `M`.
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Pixels of region `id` in raster order.
    pub fn region(&self, id: usize) -> &[(usize, usize)] {
        &self.regions[id]
    }

    pub fn regions(&self) -> &[Vec<(usize, usize)>] {
        &self.regions
    }

    pub fn ignore_count(&self) -> usize {
        self.ids.iter().filter(|&&i| i == IGNORE_ID).count()
    }

    /// Re-runs canonicalization; the identity on any constructed mask.
    pub fn canonicalize(&self) -> Self {
        Self::from_raw(self.height, self.width, &self.ids).expect("mask has at least one region")
    }
}

/// Majority-vote downsampling to `fh×fw` feature cells.
///
/// Each cell takes the most frequent non-ignore ID of its source block (ties
/// go to the smallest ID) and is ignore only when the whole block is. The
/// result is re-canonicalized, so regions that lose every cell drop out.
pub fn downsample_mask(mask: &RegionMask, fh: usize, fw: usize) -> Result<RegionMask> {
    if fh == 0
        || fw == 0
        || fh > mask.height
        || fw > mask.width
        || mask.height % fh != 0
        || mask.width % fw != 0
    {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample a {}×{} mask to {fh}×{fw}: scale factors must be integers",
            mask.height, mask.width
        )));
    }
    let (sy, sx) = (mask.height / fh, mask.width / fw);
    let mut counts = vec![0u32; mask.num_regions()];
    let mut touched = Vec::with_capacity(sy * sx);
    let mut out = Vec::with_capacity(fh * fw);
    for by in 0..fh {
        for bx in 0..fw {
            for y in by * sy..(by + 1) * sy {
                for x in bx * sx..(bx + 1) * sx {
                    let id = mask.id_at(y, x);
                    if id != IGNORE_ID {
                        if counts[id as usize] == 0 {
                            touched.push(id);
                        }
                        counts[id as usize] += 1;
                    }
                }
            }
            let mut best = IGNORE_ID;
            let mut best_count = 0;
            for &id in &touched {
                let c = counts[id as usize];
                if c > best_count || (c == best_count && id < best) {
                    best = id;
                    best_count = c;
                }
            }
            for &id in &touched {
                counts[id as usize] = 0;
            }
            touched.clear();
            out.push(best);
        }
    }
    RegionMask::from_raw(fh, fw, &out)
}

/// Row-major grid of `patch_h×patch_w` patches over an `h×w` map; border
/// patches may be smaller.
pub fn make_patch_grid(h: usize, w: usize, patch_h: usize, patch_w: usize) -> Result<RegionMask> {
    if patch_h == 0 || patch_w == 0 || patch_h > h || patch_w > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_h}×{patch_w} does not fit a {h}×{w} map"
        )));
    }
    let cols = w.div_ceil(patch_w);
    if h.div_ceil(patch_h) * cols >= IGNORE_ID as usize {
        return Err(Error::InvalidArgument(
            "too many patches for 16-bit region ids".into(),
        ));
    }
    let raw: Vec<u16> = (0..h * w)
        .map(|p| ((p / w / patch_h) * cols + (p % w) / patch_w) as u16)
        .collect();
    RegionMask::from_raw(h, w, &raw)
}
