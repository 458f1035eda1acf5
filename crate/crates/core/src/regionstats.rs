//! Region representations extracted from a `C×H×W` feature map: Gaussians,
//! mean vectors and pixel sets, each with its adjoint back to the map.
//!
//! Pixel lists are sorted before any accumulation so results are bitwise
//! independent of the order callers supply them in.

use crate::diffcore::Tensor;
use crate::maskio::RegionMask;
use crate::{Error, Result};

/// Regularizer added to every covariance diagonal.
pub const DEFAULT_COV_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CovarianceMode {
    Full,
    Diag,
}

impl CovarianceMode {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceMode::Full => "full",
            CovarianceMode::Diag => "diag",
        }
    }
}

impl std::fmt::Display for CovarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CovarianceMode::Full),
            "diag" => Ok(CovarianceMode::Diag),
            _ => Err(Error::InvalidArgument(format!(
                "invalid covariance mode '{s}' (expected one of diag, full)"
            ))),
        }
    }
}

/// Covariance of a region Gaussian: a full row-major `C×C` matrix or the `C`
/// diagonal variances.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Full(Vec<f64>),
    Diag(Vec<f64>),
}

impl Covariance {
    pub fn mode(&self) -> CovarianceMode {
        match self {
            Covariance::Full(_) => CovarianceMode::Full,
            Covariance::Diag(_) => CovarianceMode::Diag,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Covariance::Full(v) | Covariance::Diag(v) => v,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Covariance::Full(v) | Covariance::Diag(v) => v,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Covariance::Full(v) => Covariance::Full(vec![0.0; v.len()]),
            Covariance::Diag(v) => Covariance::Diag(vec![0.0; v.len()]),
        }
    }

    pub fn trace(&self, c: usize) -> f64 {
        match self {
            Covariance::Full(v) => (0..c).map(|i| v[i * c + i]).sum(),
            Covariance::Diag(v) => v.iter().sum(),
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &Covariance, s: f64) {
        for (a, b) in self.values_mut().iter_mut().zip(other.values()) {
            *a += s * b;
        }
    }
}

/// `N(mu, sigma)` fitted to the `n` feature vectors of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGaussian {
    pub region_id: usize,
    pub n: usize,
    pub mu: Vec<f64>,
    pub sigma: Covariance,
    pub eps: f64,
}

impl RegionGaussian {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mode(&self) -> CovarianceMode {
        self.sigma.mode()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionVector {
    pub region_id: usize,
    pub v: Vec<f64>,
}

/// Feature vectors of a region, copied out in sorted coordinate order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPixels {
    pub region_id: usize,
    pub coords: Vec<(usize, usize)>,
    /// Row-major `n×C`.
    pub features: Vec<f64>,
    pub dim: usize,
}

impl RegionPixels {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

fn sorted(pixels: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut p = pixels.to_vec();
    p.sort_unstable();
    p
}

fn check_pixels(fmap: &Tensor, pixels: &[(usize, usize)]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = fmap.chw()?;
    if let Some(&(r, col)) = pixels.iter().find(|&&(r, col)| r >= h || col >= w) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({r}, {col}) outside a {h}×{w} map"
        )));
    }
    Ok((c, h, w))
}

/// Row-major `n×C` gather of the feature vectors at `pixels`.
fn gather(fmap: &Tensor, pixels: &[(usize, usize)], c: usize, h: usize, w: usize) -> Vec<f64> {
    let v = fmap.data();
    let mut out = Vec::with_capacity(pixels.len() * c);
    for &(r, col) in pixels {
        for ch in 0..c {
            out.push(v[(ch * h + r) * w + col]);
        }
    }
    out
}

fn mean_of(feats: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut mu = vec![0.0; c];
    for p in 0..n {
        for (m, f) in mu.iter_mut().zip(&feats[p * c..(p + 1) * c]) {
            *m += f;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    mu
}

/// Fits the population Gaussian of the features at `pixels`, adding `eps`
/// to the covariance diagonal.
pub fn fit_region_gaussian(
    fmap: &Tensor,
    region_id: usize,
    pixels: &[(usize, usize)],
    mode: CovarianceMode,
    eps: f64,
    min_cells: usize,
) -> Result<RegionGaussian> {
    let n = pixels.len();
    if n < min_cells.max(1) {
        return Err(Error::RegionTooSmall {
            region_id,
            n,
            min: min_cells.max(1),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "covariance eps must be non-negative, got {eps}"
        )));
    }
    let (c, h, w) = check_pixels(fmap, pixels)?;
    let feats = gather(fmap, &sorted(pixels), c, h, w);
    let mu = mean_of(&feats, n, c);
    let inv_n = 1.0 / n as f64;
    let sigma = match mode {
        CovarianceMode::Diag => {
            let mut var = vec![0.0; c];
            for p in 0..n {
                for ch in 0..c {
                    let d = feats[p * c + ch] - mu[ch];
                    var[ch] += d * d;
                }
            }
            Covariance::Diag(var.into_iter().map(|s| s * inv_n + eps).collect())
        }
        CovarianceMode::Full => {
            let mut cov = vec![0.0; c * c];
            let mut d = vec![0.0; c];
            for p in 0..n {
                for ch in 0..c {
                    d[ch] = feats[p * c + ch] - mu[ch];
                }
                for i in 0..c {
                    for j in i..c {
                        cov[i * c + j] += d[i] * d[j];
                    }
                }
            }
            for i in 0..c {
                for j in i..c {
                    let v = cov[i * c + j] * inv_n + if i == j { eps } else { 0.0 };
                    cov[i * c + j] = v;
                    cov[j * c + i] = v;
                }
            }
            Covariance::Full(cov)
        }
    };
    Ok(RegionGaussian {
        region_id,
        n,
        mu,
        sigma,
        eps,
    })
}

/// Accumulates `dL/dfmap` given `dL/dmu` and `dL/dsigma` of a Gaussian fitted
/// by [`fit_region_gaussian`] on the same `fmap` and `pixels`.
///
/// Per pixel: `(1/n)·dmu + (2/n)·sym(dsigma)·(f_p − mu)`; the diagonal mode uses
/// the same rule channel by channel.
pub fn gaussian_backward(
    fmap: &Tensor,
    pixels: &[(usize, usize)],
    g: &RegionGaussian,
    dmu: &[f64],
    dsigma: &Covariance,
    grad: &mut [f64],
) -> Result<()> {
    let (c, h, w) = check_pixels(fmap, pixels)?;
    if grad.len() != fmap.len() || dmu.len() != c || g.dim() != c || dsigma.mode() != g.mode() {
        return Err(Error::InvalidArgument(
            "gaussian_backward: mismatched dimensions".into(),
        ));
    }
    let n = pixels.len() as f64;
    let v = fmap.data();
    let mut d = vec![0.0; c];
    match dsigma {
        Covariance::Diag(ds) => {
            for &(r, col) in pixels {
                for ch in 0..c {
                    let idx = (ch * h + r) * w + col;
                    grad[idx] += dmu[ch] / n + 2.0 / n * ds[ch] * (v[idx] - g.mu[ch]);
                }
            }
        }
        Covariance::Full(ds) => {
            let sym = crate::linalg::symmetrize(ds, c);
            for &(r, col) in pixels {
                for ch in 0..c {
                    d[ch] = v[(ch * h + r) * w + col] - g.mu[ch];
                }
                for i in 0..c {
                    let s: f64 = (0..c).map(|j| sym[i * c + j] * d[j]).sum();
                    grad[(i * h + r) * w + col] += dmu[i] / n + 2.0 / n * s;
                }
            }
        }
    }
    Ok(())
}

/// Gaussians of every region with at least `min_cells` cells, ordered by
/// region id.
#[derive(Clone, Debug)]
pub struct RegionFits {
    pub gaussians: Vec<RegionGaussian>,
    /// Ids of regions below the size threshold.
    pub skipped: Vec<usize>,
}

pub fn fit_all_regions(
    fmap: &Tensor,
    mask: &RegionMask,
    mode: CovarianceMode,
    eps: f64,
    min_cells: usize,
) -> Result<RegionFits> {
    let (_, h, w) = fmap.chw()?;
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::ShapeMismatch {
            op: "fit_all_regions",
            left: vec![h, w],
            right: vec![mask.height(), mask.width()],
        });
    }
    let mut fits = RegionFits {
        gaussians: Vec::new(),
        skipped: Vec::new(),
    };
    for (id, pixels) in mask.regions().iter().enumerate() {
        if pixels.len() < min_cells {
            fits.skipped.push(id);
            continue;
        }
        fits.gaussians
            .push(fit_region_gaussian(fmap, id, pixels, mode, eps, min_cells)?);
    }
    Ok(fits)
}

pub fn region_mean_vector(
    fmap: &Tensor,
    region_id: usize,
    pixels: &[(usize, usize)],
) -> Result<RegionVector> {
    if pixels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "region {region_id} has no pixels"
        )));
    }
    let (c, h, w) = check_pixels(fmap, pixels)?;
    let feats = gather(fmap, &sorted(pixels), c, h, w);
    Ok(RegionVector {
        region_id,
        v: mean_of(&feats, pixels.len(), c),
    })
}

/// Spreads `dL/dv` uniformly (weight `1/n`) over the region's pixels.
pub fn mean_vector_backward(
    fmap: &Tensor,
    pixels: &[(usize, usize)],
    dv: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let (c, h, w) = check_pixels(fmap, pixels)?;
    if dv.len() != c || grad.len() != fmap.len() {
        return Err(Error::InvalidArgument(
            "mean_vector_backward: mismatched dimensions".into(),
        ));
    }
    let n = pixels.len() as f64;
    for &(r, col) in pixels {
        for ch in 0..c {
            grad[(ch * h + r) * w + col] += dv[ch] / n;
        }
    }
    Ok(())
}

pub fn region_pixels(
    fmap: &Tensor,
    region_id: usize,
    pixels: &[(usize, usize)],
) -> Result<RegionPixels> {
    if pixels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "region {region_id} has no pixels"
        )));
    }
    let (c, h, w) = check_pixels(fmap, pixels)?;
    let coords = sorted(pixels);
    let features = gather(fmap, &coords, c, h, w);
    Ok(RegionPixels {
        region_id,
        coords,
        features,
        dim: c,
    })
}

/// Pass-through adjoint: `dfeat` is row-major `n×C`, aligned with `px.coords`.
pub fn pixels_backward(
    fmap: &Tensor,
    px: &RegionPixels,
    dfeat: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let (c, h, w) = fmap.chw()?;
    if dfeat.len() != px.len() * c || grad.len() != fmap.len() {
        return Err(Error::InvalidArgument(
            "pixels_backward: mismatched dimensions".into(),
        ));
    }
    for (i, &(r, col)) in px.coords.iter().enumerate() {
        for ch in 0..c {
            grad[(ch * h + r) * w + col] += dfeat[i * c + ch];
        }
    }
    Ok(())
}
