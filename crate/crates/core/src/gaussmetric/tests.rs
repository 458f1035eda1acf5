use super::*;
use crate::regionstats::CovarianceMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gauss(id: usize, mu: Vec<f64>, sigma: Covariance) -> RegionGaussian {
    RegionGaussian {
        region_id: id,
        n: 10,
        mu,
        sigma,
        eps: 1e-5,
    }
}

fn random_spd(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let b: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bt = linalg::transpose(&b, c);
    let mut a = linalg::matmul(&bt, &b, c);
    for i in 0..c {
        a[i * c + i] += 0.1;
    }
    linalg::symmetrize(&a, c)
}

fn random_gauss(rng: &mut ChaCha8Rng, id: usize, c: usize, mode: CovarianceMode) -> RegionGaussian {
    let mu = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let sigma = match mode {
        CovarianceMode::Full => Covariance::Full(random_spd(rng, c)),
        CovarianceMode::Diag => {
            Covariance::Diag((0..c).map(|_| rng.gen_range(0.05..3.0)).collect())
        }
    };
    gauss(id, mu, sigma)
}

fn diag_to_full(g: &RegionGaussian) -> RegionGaussian {
    let c = g.dim();
    let mut m = vec![0.0; c * c];
    for (i, v) in g.sigma.values().iter().enumerate() {
        m[i * c + i] = *v;
    }
    RegionGaussian {
        sigma: Covariance::Full(m),
        ..g.clone()
    }
}

#[test]
fn eigen_simple_cases() {
    let e = symmetric_eigen(&linalg::identity(4), 4).unwrap();
    assert!(e.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-15));

    let e = symmetric_eigen(&[9.0, 0.0, 0.0, 4.0], 2).unwrap();
    assert_eq!(e.eigenvalues, vec![4.0, 9.0]);
    // columns are the axis basis up to sign, ordered with the eigenvalues
    assert_eq!(e.eigenvectors[0 * 2 + 0].abs(), 0.0);
    assert_eq!(e.eigenvectors[1 * 2 + 0].abs(), 1.0);
    assert_eq!(e.eigenvectors[0 * 2 + 1].abs(), 1.0);

    assert!(symmetric_eigen(&[1.0, 2.0, 2.1, 1.0], 2).is_err());
}

#[test]
fn eigen_reconstruction_and_orthogonality() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for c in [2, 3, 5, 8, 16] {
        for _ in 0..10 {
            let b: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = linalg::symmetrize(&b, c);
            // shift to PSD so no clamping happens
            let mut a = a;
            for i in 0..c {
                a[i * c + i] += c as f64;
            }
            let e = symmetric_eigen(&a, c).unwrap();
            assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            let rec = e.reconstruct();
            let err = rec
                .iter()
                .zip(&a)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-10, "c={c} reconstruction err {err:e}");
            let v = &e.eigenvectors;
            let vtv = linalg::matmul(&linalg::transpose(v, c), v, c);
            for i in 0..c {
                for j in 0..c {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((vtv[i * c + j] - want).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn negative_eigenvalues_are_clamped() {
    let before = clamped_eigenvalue_count();
    let e = symmetric_eigen(&[1.0, 0.0, 0.0, -0.5], 2).unwrap();
    assert_eq!(e.eigenvalues, vec![0.0, 1.0]);
    assert!(clamped_eigenvalue_count() > before);
}

#[test]
fn sqrt_cases() {
    let s = spd_sqrt(&linalg::identity(3), 3).unwrap();
    assert!(s
        .iter()
        .zip(linalg::identity(3))
        .all(|(a, b)| (a - b).abs() < 1e-15));
    let s = spd_sqrt(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
    assert_eq!(s, vec![2.0, 0.0, 0.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for c in [2, 4, 7] {
        let b: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = linalg::matmul(&linalg::transpose(&b, c), &b, c);
        for i in 0..c {
            a[i * c + i] += 1.0;
        }
        let r = spd_sqrt(&a, c).unwrap();
        for i in 0..c {
            for j in 0..c {
                assert_eq!(r[i * c + j], r[j * c + i]);
            }
        }
        let sq = linalg::matmul(&r, &r, c);
        let norm = linalg::frobenius(&a);
        let err = sq
            .iter()
            .zip(&a)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8 * norm);
    }
}

#[test]
fn wasserstein_closed_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for mode in [CovarianceMode::Full, CovarianceMode::Diag] {
        let g = random_gauss(&mut rng, 0, 4, mode);
        assert!(wasserstein_sq(&g, &g).unwrap() <= 1e-10);
    }
    let a = gauss(0, vec![0.0, 0.0], Covariance::Full(linalg::identity(2)));
    let b = gauss(1, vec![3.0, 4.0], Covariance::Full(linalg::identity(2)));
    assert!((wasserstein_sq(&a, &b).unwrap() - 25.0).abs() < 1e-12);

    let a = gauss(0, vec![0.5], Covariance::Full(vec![1.0]));
    let b = gauss(1, vec![0.5], Covariance::Full(vec![4.0]));
    assert!((wasserstein_sq(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let a = gauss(0, vec![0.5], Covariance::Diag(vec![1.0]));
    let b = gauss(1, vec![0.5], Covariance::Diag(vec![4.0]));
    assert!((wasserstein_sq(&a, &b).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn distance_argument_checks() {
    let a = gauss(0, vec![0.0, 0.0], Covariance::Diag(vec![1.0, 1.0]));
    let b = gauss(1, vec![0.0], Covariance::Diag(vec![1.0]));
    let c = gauss(1, vec![0.0, 0.0], Covariance::Full(linalg::identity(2)));
    assert!(wasserstein_sq(&a, &b).is_err());
    assert!(wasserstein_sq(&a, &c).is_err());
    assert!(kl_gauss(&a, &c).is_err());
}

#[test]
fn full_path_matches_diagonal_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for i in 0..500 {
        let c = 1 + i % 6;
        let a = random_gauss(&mut rng, 0, c, CovarianceMode::Diag);
        let b = random_gauss(&mut rng, 1, c, CovarianceMode::Diag);
        let closed = wasserstein_sq(&a, &b).unwrap();
        let full = wasserstein_sq(&diag_to_full(&a), &diag_to_full(&b)).unwrap();
        assert!((closed - full).abs() <= 1e-10, "{closed} vs {full}");
    }
}

/// Central differences of `f` with respect to every (symmetric) parameter of
/// both Gaussians, compared with the analytic `PairGrad`.
fn check_pair_grad(
    f: &dyn Fn(&RegionGaussian, &RegionGaussian) -> f64,
    g1: &RegionGaussian,
    g2: &RegionGaussian,
    grad: &PairGrad,
) -> f64 {
    let eps = 1e-5;
    let c = g1.dim();
    let mut worst: f64 = 0.0;
    let mut record = |analytic: f64, fd: f64| {
        worst = worst.max((analytic - fd).abs() / fd.abs().max(1e-8));
    };
    for which in 0..2 {
        let base = if which == 0 { g1 } else { g2 };
        let eval = |g: RegionGaussian| if which == 0 { f(&g, g2) } else { f(g1, &g) };
        let (dmu, ds) = if which == 0 {
            (&grad.dmu1, &grad.dsigma1)
        } else {
            (&grad.dmu2, &grad.dsigma2)
        };
        for k in 0..c {
            let mut p = base.clone();
            p.mu[k] += eps;
            let mut m = base.clone();
            m.mu[k] -= eps;
            record(dmu[k], (eval(p) - eval(m)) / (2.0 * eps));
        }
        match ds {
            Covariance::Diag(d) => {
                for k in 0..c {
                    let mut p = base.clone();
                    p.sigma.values_mut()[k] += eps;
                    let mut m = base.clone();
                    m.sigma.values_mut()[k] -= eps;
                    record(d[k], (eval(p) - eval(m)) / (2.0 * eps));
                }
            }
            Covariance::Full(d) => {
                for i in 0..c {
                    for j in i..c {
                        let bump = |s: f64| {
                            let mut g = base.clone();
                            let v = g.sigma.values_mut();
                            v[i * c + j] += s;
                            if i != j {
                                v[j * c + i] += s;
                            }
                            g
                        };
                        let analytic = if i == j {
                            d[i * c + i]
                        } else {
                            d[i * c + j] + d[j * c + i]
                        };
                        record(analytic, (eval(bump(eps)) - eval(bump(-eps))) / (2.0 * eps));
                    }
                }
            }
        }
    }
    worst
}

#[test]
fn gradients_at_minimum_and_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for mode in [CovarianceMode::Full, CovarianceMode::Diag] {
        let g = random_gauss(&mut rng, 0, 3, mode);
        let (_, grad) = wasserstein_sq_grad(&g, &g).unwrap();
        for v in grad
            .dmu1
            .iter()
            .chain(&grad.dmu2)
            .chain(grad.dsigma1.values())
            .chain(grad.dsigma2.values())
        {
            assert!(v.abs() <= 1e-10, "{mode:?}: {v:e}");
        }
    }
    let a = gauss(0, vec![0.0], Covariance::Diag(vec![1.0]));
    let b = gauss(1, vec![0.0], Covariance::Diag(vec![4.0]));
    let (_, grad) = wasserstein_sq_grad(&a, &b).unwrap();
    assert_eq!(grad.dsigma1.values(), &[-1.0]);
}

#[test]
fn all_divergence_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        for mode in [CovarianceMode::Full, CovarianceMode::Diag] {
            let c = 1 + (seed as usize % 4);
            let a = random_gauss(&mut rng, 0, c, mode);
            let b = random_gauss(&mut rng, 1, c, mode);
            for div in [
                Divergence::Wasserstein,
                Divergence::Jeffreys,
                Divergence::Kl,
            ] {
                let (_, grad) = div.eval_with_grad(&a, &b).unwrap();
                let f = |x: &RegionGaussian, y: &RegionGaussian| div.eval(x, y).unwrap();
                let err = check_pair_grad(&f, &a, &b, &grad);
                assert!(err <= 1e-4, "{div:?} {mode:?} seed {seed}: {err:e}");
            }
        }
    }
}

#[test]
fn kl_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for mode in [CovarianceMode::Full, CovarianceMode::Diag] {
        let g = random_gauss(&mut rng, 0, 3, mode);
        assert!(kl_gauss(&g, &g).unwrap().abs() <= 1e-10);
        assert!(jeffreys(&g, &g).unwrap().abs() <= 1e-10);
    }
    let a = gauss(0, vec![0.0], Covariance::Full(vec![1.0]));
    let b = gauss(1, vec![1.0], Covariance::Full(vec![1.0]));
    assert!((kl_gauss(&a, &b).unwrap() - 0.5).abs() < 1e-15);
}

/// Composite Simpson quadrature of `∫ p ln(p/q)` for 1-D normals.
fn kl_quadrature(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let pdf = |x: f64, m: f64, s: f64| {
        (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let (lo, hi) = (m1 - 20.0 * s1, m1 + 20.0 * s1);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let integrand = |x: f64| {
        let p = pdf(x, m1, s1);
        if p == 0.0 {
            0.0
        } else {
            // ln(p/q) in closed algebraic form avoids underflow of q in the tails
            let lr = (s2 / s1).ln() - (x - m1).powi(2) / (2.0 * s1 * s1)
                + (x - m2).powi(2) / (2.0 * s2 * s2);
            p * lr
        }
    };
    let mut s = integrand(lo) + integrand(hi);
    for i in 1..n {
        let x = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * integrand(x);
    }
    s * h / 3.0
}

#[test]
fn kl_matches_quadrature_1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..10 {
        let (m1, m2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let (v1, v2): (f64, f64) = (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0));
        let a = gauss(0, vec![m1], Covariance::Full(vec![v1]));
        let b = gauss(1, vec![m2], Covariance::Full(vec![v2]));
        let q = kl_quadrature(m1, v1.sqrt(), m2, v2.sqrt());
        assert!((kl_gauss(&a, &b).unwrap() - q).abs() <= 1e-6);
        let ad = gauss(0, vec![m1], Covariance::Diag(vec![v1]));
        let bd = gauss(1, vec![m2], Covariance::Diag(vec![v2]));
        assert!((kl_gauss(&ad, &bd).unwrap() - q).abs() <= 1e-6);
    }
}

#[test]
fn symmetry_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for i in 0..200 {
        let mode = if i % 2 == 0 {
            CovarianceMode::Full
        } else {
            CovarianceMode::Diag
        };
        let c = 1 + i % 5;
        // same region id on both sides, as in cross-task contrast
        let a = random_gauss(&mut rng, 3, c, mode);
        let b = random_gauss(&mut rng, 3, c, mode);
        assert_eq!(
            wasserstein_sq(&a, &b).unwrap().to_bits(),
            wasserstein_sq(&b, &a).unwrap().to_bits()
        );
        assert_eq!(
            jeffreys(&a, &b).unwrap().to_bits(),
            jeffreys(&b, &a).unwrap().to_bits()
        );
        let (_, gab) = wasserstein_sq_grad(&a, &b).unwrap();
        let (_, gba) = wasserstein_sq_grad(&b, &a).unwrap();
        assert_eq!(gab.dmu1, gba.dmu2);
        assert_eq!(gab.dsigma1, gba.dsigma2);
    }
}

#[test]
fn triangle_inequality_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    for i in 0..1000 {
        let c = 1 + i % 4;
        let g: Vec<_> = (0..3)
            .map(|k| random_gauss(&mut rng, k, c, CovarianceMode::Full))
            .collect();
        let d = |x: &RegionGaussian, y: &RegionGaussian| wasserstein_sq(x, y).unwrap().sqrt();
        let slack = d(&g[0], &g[1]) + d(&g[1], &g[2]) - d(&g[0], &g[2]);
        assert!(slack >= -1e-9, "triple {i}: slack {slack:e}");
    }
}

#[test]
fn positivity_and_scale_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    for _ in 0..100 {
        let a = random_gauss(&mut rng, 0, 3, CovarianceMode::Full);
        let mut b = a.clone();
        b.mu[1] += 1e-3;
        assert!(wasserstein_sq(&a, &b).unwrap() > 0.0);
        let mut b = a.clone();
        b.sigma.values_mut()[4] += 1e-3;
        assert!(wasserstein_sq(&a, &b).unwrap() > 0.0);
        assert!(wasserstein_sq(&a, &a.clone()).unwrap() <= 1e-10);
    }
    for _ in 0..100 {
        let (m1, m2, s1, s2): (f64, f64, f64, f64) = (
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.1..2.0),
            rng.gen_range(0.1..2.0),
        );
        let t: f64 = rng.gen_range(0.1..5.0);
        let mk = |m: f64, s: f64| gauss(0, vec![m], Covariance::Full(vec![s * s]));
        let base = wasserstein_sq(&mk(m1, s1), &mk(m2, s2)).unwrap();
        let scaled = wasserstein_sq(&mk(t * m1, t * s1), &mk(t * m2, t * s2)).unwrap();
        assert!((scaled - t * t * base).abs() <= 1e-9 * (1.0 + t * t * base));
        assert!((base - ((m1 - m2).powi(2) + (s1 - s2).powi(2))).abs() <= 1e-12);
    }
}
