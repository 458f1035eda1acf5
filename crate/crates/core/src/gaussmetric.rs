//! Distances between region Gaussians and their gradients.
//!
//! The squared 2-Wasserstein distance between `N(μ1, Σ1)` and `N(μ2, Σ2)` is
//!
//! ```text
//! W² = ‖μ1 − μ2‖² + Tr Σ1 + Tr Σ2 − 2 Tr (Σ1^½ Σ2 Σ1^½)^½
//! ```
//!
//! The Bures term is evaluated in the symmetric form above (equal in trace to
//! `Tr (Σ1 Σ2)^½` for SPD inputs), so only symmetric eigenproblems are solved.
//! Diagonal covariances use the closed form `Σ_c (√s1c − √s2c)²`.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use crate::linalg;
use crate::regionstats::{Covariance, RegionGaussian};
use crate::{Error, Result};

const MAX_SWEEPS: usize = 50;
const SPECTRAL_FLOOR: f64 = 1e-8;

static CLAMPED_EIGENVALUES: AtomicUsize = AtomicUsize::new(0);

/// Number of negative eigenvalues clamped to zero so far (process-wide).
pub fn clamped_eigenvalue_count() -> usize {
    CLAMPED_EIGENVALUES.load(AtomicOrdering::Relaxed)
}

/// Eigen-decomposition `A = V·diag(λ)·Vᵀ` of a symmetric PSD matrix.
#[derive(Clone, Debug)]
pub struct SpdEigen {
    pub dim: usize,
    /// Ascending, clamped to be non-negative.
    pub eigenvalues: Vec<f64>,
    /// Row-major; column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Vec<f64>,
}

impl SpdEigen {
    pub fn reconstruct(&self) -> Vec<f64> {
        linalg::reconstruct(&self.eigenvectors, &self.eigenvalues, self.dim)
    }

    /// `V·diag(f(λ))·Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let d: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        linalg::reconstruct(&self.eigenvectors, &d, self.dim)
    }
}

/// Cyclic Jacobi eigensolver for a symmetric `n×n` matrix.
///
/// Sweeps until no off-diagonal entry exceeds machine epsilon relative to the
/// geometric mean of its diagonal pair (or 50 sweeps). Negative eigenvalues
/// are clamped to zero and counted.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<SpdEigen> {
    if n == 0 || a.len() != n * n {
        return Err(Error::InvalidArgument(format!(
            "symmetric_eigen: {} values for n = {n}",
            a.len()
        )));
    }
    if n > 64 {
        return Err(Error::InvalidArgument(format!(
            "symmetric_eigen supports n <= 64, got {n}"
        )));
    }
    let norm = linalg::frobenius(a);
    if !norm.is_finite() {
        return Err(Error::NonFinite("symmetric_eigen input".into()));
    }
    let sym_tol = 1e-9 * norm.max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (a[i * n + j] - a[j * n + i]).abs() > sym_tol {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {:e}",
                    (a[i * n + j] - a[j * n + i]).abs()
                )));
            }
        }
    }
    let mut m = linalg::symmetrize(a, n);
    let mut v = linalg::identity(n);

    // rotate until every off-diagonal entry is negligible relative to its
    // diagonal pair, which resolves small eigenvalues to full precision
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                let scale = (m[p * n + p].abs() * m[q * n + q].abs()).sqrt();
                if apq.abs() <= f64::EPSILON * scale || apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                rotated = true;
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        let mut l = m[src * n + src];
        if l < 0.0 {
            CLAMPED_EIGENVALUES.fetch_add(1, AtomicOrdering::Relaxed);
            l = 0.0;
        }
        eigenvalues.push(l);
        for k in 0..n {
            eigenvectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok(SpdEigen {
        dim: n,
        eigenvalues,
        eigenvectors,
    })
}

/// Principal square root of a symmetric PSD matrix.
pub fn spd_sqrt(a: &[f64], n: usize) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(a, n)?.map(f64::sqrt))
}

/// Gradients of a pair distance with respect to both Gaussians. Covariance
/// gradients are symmetric matrices (full mode) or per-channel (diag mode).
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub dmu1: Vec<f64>,
    pub dsigma1: Covariance,
    pub dmu2: Vec<f64>,
    pub dsigma2: Covariance,
}

impl PairGrad {
    fn swapped(self) -> Self {
        Self {
            dmu1: self.dmu2,
            dsigma1: self.dsigma2,
            dmu2: self.dmu1,
            dsigma2: self.dsigma1,
        }
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in self.dmu1.iter_mut().chain(self.dmu2.iter_mut()) {
            *v *= s;
        }
        for v in self.dsigma1.values_mut().iter_mut() {
            *v *= s;
        }
        for v in self.dsigma2.values_mut().iter_mut() {
            *v *= s;
        }
        self
    }
}

fn check_pair(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<usize> {
    if g1.dim() != g2.dim() {
        return Err(Error::ShapeMismatch {
            op: "gaussian distance",
            left: vec![g1.dim()],
            right: vec![g2.dim()],
        });
    }
    if g1.mode() != g2.mode() {
        return Err(Error::InvalidArgument(format!(
            "covariance mode mismatch: {:?} vs {:?}",
            g1.mode(),
            g2.mode()
        )));
    }
    Ok(g1.dim())
}

/// Total order used to evaluate symmetric distances with a canonical argument
/// order, making `d(a, b)` and `d(b, a)` bitwise equal.
fn canonical_cmp(a: &RegionGaussian, b: &RegionGaussian) -> Ordering {
    a.region_id
        .cmp(&b.region_id)
        .then(a.n.cmp(&b.n))
        .then_with(|| {
            a.mu.iter()
                .chain(a.sigma.values())
                .zip(b.mu.iter().chain(b.sigma.values()))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn symmetric_eval<T>(
    g1: &RegionGaussian,
    g2: &RegionGaussian,
    f: impl Fn(&RegionGaussian, &RegionGaussian) -> Result<(f64, T)>,
    swap: impl Fn(T) -> T,
) -> Result<(f64, T)> {
    if canonical_cmp(g1, g2) == Ordering::Greater {
        let (v, t) = f(g2, g1)?;
        Ok((v, swap(t)))
    } else {
        f(g1, g2)
    }
}

fn mean_term(g1: &RegionGaussian, g2: &RegionGaussian) -> f64 {
    g1.mu
        .iter()
        .zip(&g2.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

struct BuresParts {
    bures_trace: f64,
    // Kept for the gradient.
    eig1: SpdEigen,
    sqrt1: Vec<f64>,
    eig_m: SpdEigen,
}

fn bures_full(s1: &[f64], s2: &[f64], c: usize) -> Result<BuresParts> {
    let eig1 = symmetric_eigen(s1, c)?;
    let sqrt1 = eig1.map(f64::sqrt);
    let m = linalg::symmetrize(
        &linalg::matmul(&linalg::matmul(&sqrt1, s2, c), &sqrt1, c),
        c,
    );
    let eig_m = symmetric_eigen(&m, c)?;
    let bures_trace = eig_m.eigenvalues.iter().map(|l| l.sqrt()).sum();
    Ok(BuresParts {
        bures_trace,
        eig1,
        sqrt1,
        eig_m,
    })
}

fn wasserstein_raw(
    g1: &RegionGaussian,
    g2: &RegionGaussian,
    want_grad: bool,
) -> Result<(f64, Option<PairGrad>)> {
    let c = check_pair(g1, g2)?;
    let mt = mean_term(g1, g2);
    let dmu1: Vec<f64> = g1
        .mu
        .iter()
        .zip(&g2.mu)
        .map(|(a, b)| 2.0 * (a - b))
        .collect();
    let dmu2: Vec<f64> = dmu1.iter().map(|x| -x).collect();
    match (&g1.sigma, &g2.sigma) {
        (Covariance::Diag(s1), Covariance::Diag(s2)) => {
            let cov: f64 = s1
                .iter()
                .zip(s2)
                .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
                .sum();
            let value = (mt + cov).max(0.0);
            let grad = want_grad.then(|| {
                let floor1 = g1.eps.max(f64::MIN_POSITIVE);
                let floor2 = g2.eps.max(f64::MIN_POSITIVE);
                let ds1 = s1
                    .iter()
                    .zip(s2)
                    .map(|(a, b)| 1.0 - (b / a.max(floor1)).sqrt())
                    .collect();
                let ds2 = s1
                    .iter()
                    .zip(s2)
                    .map(|(a, b)| 1.0 - (a / b.max(floor2)).sqrt())
                    .collect();
                PairGrad {
                    dmu1,
                    dsigma1: Covariance::Diag(ds1),
                    dmu2,
                    dsigma2: Covariance::Diag(ds2),
                }
            });
            Ok((value, grad))
        }
        (Covariance::Full(s1), Covariance::Full(s2)) => {
            let parts = bures_full(s1, s2, c)?;
            let raw = mt + linalg::trace(s1, c) + linalg::trace(s2, c) - 2.0 * parts.bures_trace;
            if raw < -1e-10 * (1.0 + linalg::trace(s1, c) + linalg::trace(s2, c)) {
                return Err(Error::NonFinite(format!(
                    "negative squared Wasserstein distance {raw:e}"
                )));
            }
            let value = raw.max(0.0);
            let grad = if want_grad {
                Some(full_wasserstein_grad(s2, c, &parts, dmu1, dmu2))
            } else {
                None
            };
            Ok((value, grad))
        }
        _ => unreachable!("modes checked"),
    }
}

/// Gradient of the full-covariance distance by the spectral rule.
///
/// With `M = S1 Σ2 S1`, `S1 = Σ1^½`: `∂W/∂M = −M^{-½}`, so
/// `∂W/∂Σ2 = I − S1 M^{-½} S1`, `∂W/∂S1 = H S1 Σ2 + Σ2 S1 H` with `H = −M^{-½}`, and
/// `∂W/∂Σ1 = I + V1 ((V1ᵀ ∂S1 V1) ∘ K) V1ᵀ`, `K_ij = 1/(√λi + √λj)`, the divided
/// difference of `√·` with its denominator floored.
fn full_wasserstein_grad(
    s2: &[f64],
    c: usize,
    parts: &BuresParts,
    dmu1: Vec<f64>,
    dmu2: Vec<f64>,
) -> PairGrad {
    let h = parts.eig_m.map(|l| -1.0 / l.max(1e-300).sqrt());
    let sqrt1 = &parts.sqrt1;
    let mut dsigma2 = linalg::matmul(&linalg::matmul(sqrt1, &h, c), sqrt1, c);
    for i in 0..c {
        dsigma2[i * c + i] += 1.0;
    }
    let x = linalg::matmul(&linalg::matmul(&h, sqrt1, c), s2, c);
    let xt = linalg::transpose(&x, c);
    let ds1: Vec<f64> = x.iter().zip(&xt).map(|(a, b)| a + b).collect();

    let v = &parts.eig1.eigenvectors;
    let vt = linalg::transpose(v, c);
    let mut inner = linalg::matmul(&linalg::matmul(&vt, &ds1, c), v, c);
    let roots: Vec<f64> = parts.eig1.eigenvalues.iter().map(|l| l.sqrt()).collect();
    for i in 0..c {
        for j in 0..c {
            inner[i * c + j] /= (roots[i] + roots[j]).max(SPECTRAL_FLOOR);
        }
    }
    let mut dsigma1 = linalg::matmul(&linalg::matmul(v, &inner, c), &vt, c);
    for i in 0..c {
        dsigma1[i * c + i] += 1.0;
    }
    PairGrad {
        dmu1,
        dsigma1: Covariance::Full(linalg::symmetrize(&dsigma1, c)),
        dmu2,
        dsigma2: Covariance::Full(linalg::symmetrize(&dsigma2, c)),
    }
}

/// Squared 2-Wasserstein distance; symmetric and non-negative.
pub fn wasserstein_sq(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<f64> {
    symmetric_eval(
        g1,
        g2,
        |a, b| wasserstein_raw(a, b, false).map(|(v, _)| (v, ())),
        |t| t,
    )
    .map(|(v, _)| v)
}

/// `(W², ∂W²/∂(μ1, Σ1, μ2, Σ2))`.
pub fn wasserstein_sq_grad(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<(f64, PairGrad)> {
    symmetric_eval(
        g1,
        g2,
        |a, b| wasserstein_raw(a, b, true).map(|(v, g)| (v, g.expect("gradient requested"))),
        PairGrad::swapped,
    )
}

fn kl_raw(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<(f64, PairGrad)> {
    let c = check_pair(g1, g2)?;
    let delta: Vec<f64> = g2.mu.iter().zip(&g1.mu).map(|(b, a)| b - a).collect();
    match (&g1.sigma, &g2.sigma) {
        (Covariance::Diag(s1), Covariance::Diag(s2)) => {
            if let Some(bad) = s1.iter().chain(s2).find(|&&s| !(s > 0.0)) {
                return Err(Error::NonFinite(format!(
                    "KL needs positive variances, got {bad}"
                )));
            }
            let mut value = 0.0;
            let mut dmu1 = Vec::with_capacity(c);
            let mut ds1 = Vec::with_capacity(c);
            let mut ds2 = Vec::with_capacity(c);
            for k in 0..c {
                let (a, b, d) = (s1[k], s2[k], delta[k]);
                value += a / b + d * d / b - 1.0 + b.ln() - a.ln();
                dmu1.push(-d / b);
                ds1.push(0.5 * (1.0 / b - 1.0 / a));
                ds2.push(0.5 * (1.0 / b - a / (b * b) - d * d / (b * b)));
            }
            let dmu2 = dmu1.iter().map(|x| -x).collect();
            Ok((
                (0.5 * value).max(0.0),
                PairGrad {
                    dmu1,
                    dsigma1: Covariance::Diag(ds1),
                    dmu2,
                    dsigma2: Covariance::Diag(ds2),
                },
            ))
        }
        (Covariance::Full(s1), Covariance::Full(s2)) => {
            let l1 = linalg::cholesky(s1, c)
                .ok_or_else(|| Error::NonFinite("KL: Σ1 is not positive definite".into()))?;
            let l2 = linalg::cholesky(s2, c)
                .ok_or_else(|| Error::NonFinite("KL: Σ2 is not positive definite".into()))?;
            let inv1 = linalg::chol_inverse(&l1, c);
            let inv2 = linalg::chol_inverse(&l2, c);
            let a = linalg::matmul(&inv2, s1, c);
            let w = linalg::chol_solve(&l2, &delta, c);
            let quad: f64 = delta.iter().zip(&w).map(|(d, x)| d * x).sum();
            let value = 0.5
                * (linalg::trace(&a, c) + quad - c as f64 + linalg::chol_logdet(&l2, c)
                    - linalg::chol_logdet(&l1, c));
            let dmu1: Vec<f64> = w.iter().map(|x| -x).collect();
            let dmu2 = w.clone();
            let mut ds1 = vec![0.0; c * c];
            let b = linalg::matmul(&a, &inv2, c);
            let mut ds2 = vec![0.0; c * c];
            for i in 0..c {
                for j in 0..c {
                    ds1[i * c + j] = 0.5 * (inv2[i * c + j] - inv1[i * c + j]);
                    ds2[i * c + j] = 0.5 * (inv2[i * c + j] - b[i * c + j] - w[i] * w[j]);
                }
            }
            Ok((
                value.max(0.0),
                PairGrad {
                    dmu1,
                    dsigma1: Covariance::Full(linalg::symmetrize(&ds1, c)),
                    dmu2,
                    dsigma2: Covariance::Full(linalg::symmetrize(&ds2, c)),
                },
            ))
        }
        _ => unreachable!("modes checked"),
    }
}

/// `KL(N1 ‖ N2)`.
pub fn kl_gauss(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<f64> {
    kl_raw(g1, g2).map(|(v, _)| v)
}

pub fn kl_gauss_grad(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<(f64, PairGrad)> {
    kl_raw(g1, g2)
}

fn jeffreys_raw(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<(f64, PairGrad)> {
    let (v12, g12) = kl_raw(g1, g2)?;
    let (v21, g21) = kl_raw(g2, g1)?;
    let g21 = g21.swapped();
    let mut g = g12;
    g.dmu1.iter_mut().zip(&g21.dmu1).for_each(|(a, b)| *a += b);
    g.dmu2.iter_mut().zip(&g21.dmu2).for_each(|(a, b)| *a += b);
    g.dsigma1.add_scaled(&g21.dsigma1, 1.0);
    g.dsigma2.add_scaled(&g21.dsigma2, 1.0);
    Ok((0.5 * (v12 + v21), g.scaled(0.5)))
}

/// Symmetrized KL: `½ (KL(1‖2) + KL(2‖1))`.
pub fn jeffreys(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<f64> {
    symmetric_eval(g1, g2, jeffreys_raw, PairGrad::swapped).map(|(v, _)| v)
}

pub fn jeffreys_grad(g1: &RegionGaussian, g2: &RegionGaussian) -> Result<(f64, PairGrad)> {
    symmetric_eval(g1, g2, jeffreys_raw, PairGrad::swapped)
}

/// Distance between region distributions used by the contrast objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Divergence {
    Wasserstein,
    Jeffreys,
    /// `KL(anchor ‖ key)`.
    Kl,
}

impl Divergence {
    pub const ALL: [Divergence; 3] = [
        Divergence::Wasserstein,
        Divergence::Jeffreys,
        Divergence::Kl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Divergence::Wasserstein => "wasserstein",
            Divergence::Jeffreys => "jeffreys",
            Divergence::Kl => "kl",
        }
    }

    pub fn eval_with_grad(
        self,
        g1: &RegionGaussian,
        g2: &RegionGaussian,
    ) -> Result<(f64, PairGrad)> {
        match self {
            Divergence::Wasserstein => wasserstein_sq_grad(g1, g2),
            Divergence::Jeffreys => jeffreys_grad(g1, g2),
            Divergence::Kl => kl_gauss_grad(g1, g2),
        }
    }

    pub fn eval(self, g1: &RegionGaussian, g2: &RegionGaussian) -> Result<f64> {
        match self {
            Divergence::Wasserstein => wasserstein_sq(g1, g2),
            Divergence::Jeffreys => jeffreys(g1, g2),
            Divergence::Kl => kl_gauss(g1, g2),
        }
    }
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Divergence::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "invalid distance '{s}' (expected one of wasserstein, jeffreys, kl)"
                ))
            })
    }
}

#[cfg(test)]
mod tests;
