//! Supervised losses for labeled tasks and the evaluation metrics.
//!
//! Losses are tape ops. Metric sums are kept in fixed point so that merging
//! accumulators gives the same bits as a single pass in any split.

use crate::diffcore::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Result};

/// Fixed-point scale of the metric error sums.
const FIXED_SCALE: f64 = (1u64 << 40) as f64;

fn to_fixed(x: f64) -> i128 {
    (x * FIXED_SCALE).round() as i128
}

fn from_fixed(s: i128) -> f64 {
    s as f64 / FIXED_SCALE
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![got],
            right: vec![want],
        });
    }
    Ok(())
}

/// Mean cross-entropy over non-ignored pixels and its gradient.
pub fn seg_ce(logits: &Tensor, labels: &[u16], ignore_id: u16) -> Result<(f64, Vec<f64>)> {
    let (l, h, w) = logits.chw()?;
    let hw = h * w;
    check_len("seg_ce_loss", labels.len(), hw)?;
    let x = logits.data();
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    let mut p = vec![0.0; l];
    for (px, &y) in labels.iter().enumerate() {
        if y == ignore_id {
            continue;
        }
        let y = y as usize;
        if y >= l {
            return Err(Error::Domain {
                op: "seg_ce_loss",
                index: px,
                value: y as f64,
            });
        }
        let m = (0..l)
            .map(|c| x[c * hw + px])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..l {
            p[c] = (x[c * hw + px] - m).exp();
            s += p[c];
        }
        total += s.ln() + m - x[y * hw + px];
        for c in 0..l {
            grad[c * hw + px] = p[c] / s - if c == y { 1.0 } else { 0.0 };
        }
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// Mean `|pred - gt|` over valid pixels and its subgradient (0 at equality).
pub fn depth_l1(pred: &Tensor, gt: &[f64], valid: &[bool]) -> Result<(f64, Vec<f64>)> {
    let (c, h, w) = pred.chw()?;
    check_len("depth_l1_loss", c, 1)?;
    check_len("depth_l1_loss", gt.len(), h * w)?;
    check_len("depth_l1_loss", valid.len(), h * w)?;
    let mut grad = vec![0.0; h * w];
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&p, &g)) in pred.data().iter().zip(gt).enumerate() {
        if !valid[i] {
            continue;
        }
        let d = p - g;
        total += d.abs();
        grad[i] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// Mean `1 - <pred, gt>` over valid pixels and its gradient.
pub fn normal_cosine(pred: &Tensor, gt: &[f64], valid: &[bool]) -> Result<(f64, Vec<f64>)> {
    let (c, h, w) = pred.chw()?;
    let hw = h * w;
    check_len("normal_cosine_loss", c, 3)?;
    check_len("normal_cosine_loss", gt.len(), 3 * hw)?;
    check_len("normal_cosine_loss", valid.len(), hw)?;
    let x = pred.data();
    let mut grad = vec![0.0; 3 * hw];
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..hw).filter(|&i| valid[i]) {
        let dot: f64 = (0..3).map(|k| x[k * hw + i] * gt[k * hw + i]).sum();
        total += 1.0 - dot;
        for k in 0..3 {
            grad[k * hw + i] = -gt[k * hw + i];
        }
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// Scalar loss whose gradient was computed with the forward value.
struct PrecomputedLoss {
    name: &'static str,
    grad: Vec<f64>,
    kinks: Vec<bool>,
}

impl CustomOp for PrecomputedLoss {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let g = grad_out[0];
        Ok(vec![
            needs[0].then(|| self.grad.iter().map(|v| v * g).collect())
        ])
    }

    fn kink_pattern(&self, out: &mut Vec<bool>) {
        out.extend_from_slice(&self.kinks);
    }
}

fn record(
    tape: &mut Tape,
    input: Var,
    name: &'static str,
    (value, grad): (f64, Vec<f64>),
    kinks: Vec<bool>,
) -> Result<Var> {
    tape.custom(
        &[input],
        Tensor::scalar(value),
        Box::new(PrecomputedLoss { name, grad, kinks }),
    )
}

/// Fused log-softmax and negative log-likelihood over an `L×H×W` logit map.
pub fn seg_ce_loss(tape: &mut Tape, logits: Var, labels: &[u16], ignore_id: u16) -> Result<Var> {
    let r = seg_ce(tape.value(logits), labels, ignore_id)?;
    record(tape, logits, "seg_ce_loss", r, Vec::new())
}

pub fn depth_l1_loss(tape: &mut Tape, pred: Var, gt: &[f64], valid: &[bool]) -> Result<Var> {
    let r = depth_l1(tape.value(pred), gt, valid)?;
    let kinks = tape
        .value(pred)
        .data()
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|((p, g), _)| p > g)
        .collect();
    record(tape, pred, "depth_l1_loss", r, kinks)
}

pub fn normal_cosine_loss(tape: &mut Tape, pred: Var, gt: &[f64], valid: &[bool]) -> Result<Var> {
    let r = normal_cosine(tape.value(pred), gt, valid)?;
    record(tape, pred, "normal_cosine_loss", r, Vec::new())
}

/// Per-pixel arg-max class of an `L×H×W` logit map; ties go to the lower class.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u16>> {
    let (l, h, w) = logits.chw()?;
    let hw = h * w;
    let x = logits.data();
    Ok((0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..l {
                if x[c * hw + i] > x[best * hw + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect())
}

/// Running counts for mIoU, aErr and mErr. Mergeable in any order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricAccumulator {
    intersection: Vec<u64>,
    pred_count: Vec<u64>,
    gt_count: Vec<u64>,
    depth_abs_sum: i128,
    depth_count: u64,
    angle_sum: i128,
    angle_count: u64,
}

impl MetricAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            pred_count: vec![0; num_classes],
            gt_count: vec![0; num_classes],
            depth_abs_sum: 0,
            depth_count: 0,
            angle_sum: 0,
            angle_count: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.intersection.len()
    }

    /// Adds class predictions; pixels whose ground truth is `ignore_id` are skipped.
    pub fn add_segmentation(&mut self, pred: &[u16], gt: &[u16], ignore_id: u16) -> Result<()> {
        check_len("miou", pred.len(), gt.len())?;
        let l = self.num_classes();
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore_id {
                continue;
            }
            let bad = if p as usize >= l {
                Some(p)
            } else if g as usize >= l {
                Some(g)
            } else {
                None
            };
            if let Some(v) = bad {
                return Err(Error::Domain {
                    op: "miou",
                    index: i,
                    value: v as f64,
                });
            }
            self.pred_count[p as usize] += 1;
            self.gt_count[g as usize] += 1;
            if p == g {
                self.intersection[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn add_depth(&mut self, pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<()> {
        check_len("aerr", pred.len(), gt.len())?;
        for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            self.depth_abs_sum += to_fixed((p - g).abs());
            self.depth_count += 1;
        }
        Ok(())
    }

    /// Adds unit normals stored as `3×N` planes.
    pub fn add_normals(&mut self, pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<()> {
        check_len("merr", pred.len(), gt.len())?;
        if pred.len() % 3 != 0 {
            return Err(Error::InvalidArgument(
                "normal planes must have 3 channels".into(),
            ));
        }
        let n = pred.len() / 3;
        for i in 0..n {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            let dot: f64 = (0..3).map(|k| pred[k * n + i] * gt[k * n + i]).sum();
            self.angle_sum += to_fixed(dot.clamp(-1.0, 1.0).acos().to_degrees());
            self.angle_count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        check_len(
            "MetricAccumulator::merge",
            other.num_classes(),
            self.num_classes(),
        )?;
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.pred_count.iter_mut().zip(&other.pred_count) {
            *a += b;
        }
        for (a, b) in self.gt_count.iter_mut().zip(&other.gt_count) {
            *a += b;
        }
        self.depth_abs_sum += other.depth_abs_sum;
        self.depth_count += other.depth_count;
        self.angle_sum += other.angle_sum;
        self.angle_count += other.angle_count;
        Ok(())
    }

    /// Mean IoU over classes present in prediction or ground truth.
    pub fn miou(&self) -> Option<f64> {
        let mut ious: Vec<f64> = (0..self.num_classes())
            .filter_map(|c| {
                let union = self.pred_count[c] + self.gt_count[c] - self.intersection[c];
                (union > 0).then(|| self.intersection[c] as f64 / union as f64)
            })
            .collect();
        // sorted so the mean does not depend on class numbering
        ious.sort_unstable_by(f64::total_cmp);
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn aerr(&self) -> Option<f64> {
        (self.depth_count > 0).then(|| from_fixed(self.depth_abs_sum) / self.depth_count as f64)
    }

    /// Mean angular error in degrees.
    pub fn merr(&self) -> Option<f64> {
        (self.angle_count > 0).then(|| from_fixed(self.angle_sum) / self.angle_count as f64)
    }
}

pub fn miou(pred: &[u16], gt: &[u16], num_classes: usize, ignore_id: u16) -> Result<f64> {
    let mut acc = MetricAccumulator::new(num_classes);
    acc.add_segmentation(pred, gt, ignore_id)?;
    Ok(acc.miou().unwrap_or(0.0))
}

pub fn aerr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mut acc = MetricAccumulator::new(0);
    acc.add_depth(pred, gt, None)?;
    Ok(acc.aerr().unwrap_or(0.0))
}

/// Mean angle between `3×N` normal planes, in degrees.
pub fn merr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mut acc = MetricAccumulator::new(0);
    acc.add_normals(pred, gt, None)?;
    Ok(acc.merr().unwrap_or(0.0))
}
