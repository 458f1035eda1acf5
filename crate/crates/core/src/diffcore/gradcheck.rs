use super::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Halving step grid for [`grad_check_stencil`] on badly conditioned losses.
pub const HALVING_STEPS: [f64; 6] = [1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5, 3.125e-5];

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - fd| / max(1e-8, |fd|)`.
    pub max_rel_err: f64,
    /// Coordinate attaining `max_rel_err`.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose ±eps evaluations crossed a kink (relu sign flip,
    /// abs branch change) and were therefore not compared.
    pub skipped_kinks: usize,
}

/// Compares the tape gradient of the scalar `f(x)` against central finite
/// differences on every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h²)`.
    #[default]
    ThreePoint,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error `O(h⁴)`;
    /// tolerates a larger `h` on badly conditioned functions.
    FivePoint,
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_stencil(f, x, &[eps], coords, Stencil::ThreePoint)
}

/// [`grad_check_coords`] with a chosen stencil and decreasing `steps`.
///
/// A step qualifies for a coordinate when all its evaluations share the
/// unperturbed kink pattern; a coordinate with no qualifying step is skipped.
/// With several qualifying steps the estimate comes from the adjacent pair
/// (in `steps` order) whose estimates agree most closely, taking the larger
/// step of that pair: the plateau between truncation and roundoff error.
/// Steps that halve share evaluations, so a five-point grid such as
/// [`HALVING_STEPS`] costs two evaluations per extra step.
pub fn grad_check_stencil<F>(
    f: F,
    x: &Tensor,
    steps: &[f64],
    coords: &[usize],
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let base_pattern = tape.kink_pattern();

    let eval = |xp: Tensor| -> Result<(f64, Vec<bool>)> {
        let mut t = Tape::new();
        let v = t.leaf(xp, false);
        let o = f(&mut t, v)?;
        Ok((t.value(o).item(), t.kink_pattern()))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
        skipped_kinks: 0,
    };
    for &i in coords {
        // offsets repeat across steps that halve, so evaluations are memoized
        let mut seen: Vec<(u64, (f64, bool))> = Vec::new();
        let mut shifted = |d: f64| -> Result<(f64, bool)> {
            if let Some(&(_, r)) = seen.iter().find(|(k, _)| *k == d.to_bits()) {
                return Ok(r);
            }
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            let (v, p) = eval(xp)?;
            let r = (v, p == base_pattern);
            seen.push((d.to_bits(), r));
            Ok(r)
        };
        let mut estimates = Vec::with_capacity(steps.len());
        for &eps in steps {
            let (fp, okp) = shifted(eps)?;
            let (fm, okm) = shifted(-eps)?;
            let (fd, ok) = match stencil {
                Stencil::ThreePoint => ((fp - fm) / (2.0 * eps), okp && okm),
                Stencil::FivePoint => {
                    let (fp2, okp2) = shifted(2.0 * eps)?;
                    let (fm2, okm2) = shifted(-2.0 * eps)?;
                    (
                        (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * eps),
                        okp && okm && okp2 && okm2,
                    )
                }
            };
            if ok {
                estimates.push(fd);
            }
        }
        let Some(fd) = plateau(&estimates) else {
            report.skipped_kinks += 1;
            continue;
        };
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

fn plateau(estimates: &[f64]) -> Option<f64> {
    if estimates.len() < 2 {
        return estimates.first().copied();
    }
    estimates
        .windows(2)
        .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
        .map(|w| w[0])
}
