//! Toy multi-task network, the auxiliary mapper into the joint feature space,
//! initialization, Adam, and checkpoints.
//!
//! All parameters live in one flat list of tensors, kernel then bias for each
//! [`Layer`] in [`Layer::ALL`] order. Optimizer state, checkpoints and
//! gradients use the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{CustomOp, Tape, Tensor, Var};
use crate::maskio::IGNORE_ID;
use crate::task::Task;
use crate::{Error, Result};

/// Channels of the joint feature space.
pub const C_JOINT: usize = 16;
const ADAPTER_OUT: usize = 16;
const ENC_CHANNELS: [usize; 4] = [3, 16, 32, 32];
/// Floor of the per-pixel norm in normal prediction.
pub const NORMAL_NORM_FLOOR: f64 = 1e-8;

/// One 3×3 convolution of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Encoder(usize),
    Head(Task),
    Adapter(Task),
    Trunk(usize),
}

impl Layer {
    pub const ALL: [Layer; 11] = [
        Layer::Encoder(0),
        Layer::Encoder(1),
        Layer::Encoder(2),
        Layer::Head(Task::Segmentation),
        Layer::Head(Task::Depth),
        Layer::Head(Task::Normal),
        Layer::Adapter(Task::Segmentation),
        Layer::Adapter(Task::Depth),
        Layer::Adapter(Task::Normal),
        Layer::Trunk(0),
        Layer::Trunk(1),
    ];

    fn slot(self) -> usize {
        match self {
            Layer::Encoder(i) => i,
            Layer::Head(t) => 3 + t.index(),
            Layer::Adapter(t) => 6 + t.index(),
            Layer::Trunk(i) => 9 + i,
        }
    }

    pub fn name(self) -> String {
        match self {
            Layer::Encoder(i) => format!("encoder{i}"),
            Layer::Head(t) => format!("head.{t}"),
            Layer::Adapter(t) => format!("adapter.{t}"),
            Layer::Trunk(i) => format!("trunk{i}"),
        }
    }

    /// `(out, in)` channels.
    pub fn channels(self, num_classes: usize) -> (usize, usize) {
        match self {
            Layer::Encoder(i) => (ENC_CHANNELS[i + 1], ENC_CHANNELS[i]),
            Layer::Head(t) => (t.channels(num_classes), ENC_CHANNELS[3]),
            Layer::Adapter(t) => (ADAPTER_OUT, t.channels(num_classes)),
            Layer::Trunk(0) => (ADAPTER_OUT, ADAPTER_OUT),
            Layer::Trunk(_) => (C_JOINT, ADAPTER_OUT),
        }
    }

    /// Input channels times kernel area.
    pub fn fan_in(self, num_classes: usize) -> usize {
        self.channels(num_classes).1 * 9
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    num_classes: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn kernel(&self, layer: Layer) -> &Tensor {
        &self.tensors[2 * layer.slot()]
    }

    pub fn bias(&self, layer: Layer) -> &Tensor {
        &self.tensors[2 * layer.slot() + 1]
    }

    /// Tensor names in storage order.
    pub fn names() -> Vec<String> {
        Layer::ALL
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name()), format!("{}.bias", l.name())])
            .collect()
    }

    fn expected_shapes(num_classes: usize) -> Vec<Vec<usize>> {
        Layer::ALL
            .iter()
            .flat_map(|l| {
                let (o, i) = l.channels(num_classes);
                [vec![o, i, 3, 3], vec![o]]
            })
            .collect()
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }
}

/// Uniform `(-b, b)` weights with `b = sqrt(6 / fan_in)`, zero biases.
pub fn init_params(seed: u64, num_classes: usize) -> Result<ModelParams> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(2 * Layer::ALL.len());
    for layer in Layer::ALL {
        let (o, i) = layer.channels(num_classes);
        let b = (6.0 / layer.fan_in(num_classes) as f64).sqrt();
        tensors.push(Tensor::from_fn(&[o, i, 3, 3], |_| rng.gen_range(-b..b)));
        tensors.push(Tensor::zeros(&[o]));
    }
    Ok(ModelParams {
        num_classes,
        tensors,
    })
}

/// Tape handles of the parameters, in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn kernel(&self, layer: Layer) -> Var {
        self.0[2 * layer.slot()]
    }

    pub fn bias(&self, layer: Layer) -> Var {
        self.0[2 * layer.slot() + 1]
    }

    /// Swaps the handle of tensor `index`.
    pub(crate) fn replace(&mut self, index: usize, var: Var) {
        self.0[index] = var;
    }

    fn conv(&self, tape: &mut Tape, layer: Layer, x: Var) -> Result<Var> {
        tape.conv2d_3x3(x, self.kernel(layer), self.bias(layer))
    }

    /// Gradients after [`Tape::backward`], zeros for unreached tensors.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
            })
            .collect()
    }
}

/// Per-task outputs of [`backbone_forward`].
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    /// `L×H×W` logits.
    pub seg: Var,
    /// `1×H×W` in `(0, 1)`.
    pub depth: Var,
    /// `3×H×W` unit vectors.
    pub normal: Var,
}

impl Predictions {
    pub fn get(&self, task: Task) -> Var {
        match task {
            Task::Segmentation => self.seg,
            Task::Depth => self.depth,
            Task::Normal => self.normal,
        }
    }
}

fn check_even(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    let (c, h, w) = t.chw()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "{op} needs even extents, got {h}×{w}"
        )));
    }
    Ok((c, h, w))
}

pub fn backbone_forward(tape: &mut Tape, params: &ParamVars, image: Var) -> Result<Predictions> {
    let (c, _, _) = check_even(tape.value(image), "backbone_forward")?;
    if c != ENC_CHANNELS[0] {
        return Err(Error::ShapeMismatch {
            op: "backbone_forward",
            left: vec![c],
            right: vec![ENC_CHANNELS[0]],
        });
    }
    let x = params.conv(tape, Layer::Encoder(0), image)?;
    let x = tape.relu(x)?;
    let x = tape.downsample_avg2x(x)?;
    let x = params.conv(tape, Layer::Encoder(1), x)?;
    let x = tape.relu(x)?;
    let x = params.conv(tape, Layer::Encoder(2), x)?;
    let feat = tape.relu(x)?;
    let head = |tape: &mut Tape, task| -> Result<Var> {
        let y = params.conv(tape, Layer::Head(task), feat)?;
        tape.upsample_nearest2x(y)
    };
    let seg = head(tape, Task::Segmentation)?;
    let depth = head(tape, Task::Depth)?;
    let normal = head(tape, Task::Normal)?;
    Ok(Predictions {
        seg,
        depth: sigmoid(tape, depth)?,
        normal: normalize_pixels(tape, normal)?,
    })
}

struct SigmoidOp;

impl CustomOp for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![needs[0].then(|| {
            output
                .data()
                .iter()
                .zip(grad_out)
                .map(|(s, g)| g * s * (1.0 - s))
                .collect()
        })])
    }
}

/// Elementwise `1 / (1 + e^{-x})`.
pub fn sigmoid(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    let out = Tensor::new(t.shape().to_vec(), data)?;
    tape.custom(&[x], out, Box::new(SigmoidOp))
}

struct NormalizeOp {
    /// Per-pixel norm before flooring.
    norms: Vec<f64>,
}

impl CustomOp for NormalizeOp {
    fn name(&self) -> &'static str {
        "normalize_pixels"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let hw = self.norms.len();
        let c = output.len() / hw;
        let y = output.data();
        let mut g = vec![0.0; output.len()];
        for (i, &n) in self.norms.iter().enumerate() {
            if n > NORMAL_NORM_FLOOR {
                let dot: f64 = (0..c).map(|k| y[k * hw + i] * grad_out[k * hw + i]).sum();
                for k in 0..c {
                    g[k * hw + i] = (grad_out[k * hw + i] - y[k * hw + i] * dot) / n;
                }
            } else {
                for k in 0..c {
                    g[k * hw + i] = grad_out[k * hw + i] / NORMAL_NORM_FLOOR;
                }
            }
        }
        Ok(vec![Some(g)])
    }

    fn kink_pattern(&self, out: &mut Vec<bool>) {
        out.extend(self.norms.iter().map(|&n| n > NORMAL_NORM_FLOOR));
    }
}

/// Scales each pixel's channel vector to unit length (norm floored).
pub fn normalize_pixels(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let (c, h, w) = t.chw()?;
    let hw = h * w;
    let v = t.data();
    let norms: Vec<f64> = (0..hw)
        .map(|i| (0..c).map(|k| v[k * hw + i].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0; v.len()];
    for (i, &n) in norms.iter().enumerate() {
        let d = n.max(NORMAL_NORM_FLOOR);
        for k in 0..c {
            out[k * hw + i] = v[k * hw + i] / d;
        }
    }
    let out = Tensor::new(vec![c, h, w], out)?;
    tape.custom(&[x], out, Box::new(NormalizeOp { norms }))
}

/// One-hot `L×H×W` planes; ignored pixels get all-zero rows.
pub fn one_hot(classes: &[u16], num_classes: usize, height: usize, width: usize) -> Result<Tensor> {
    let hw = height * width;
    if classes.len() != hw {
        return Err(Error::ShapeMismatch {
            op: "one_hot",
            left: vec![classes.len()],
            right: vec![height, width],
        });
    }
    let mut data = vec![0.0; num_classes * hw];
    for (i, &c) in classes.iter().enumerate() {
        if c == IGNORE_ID {
            continue;
        }
        if c as usize >= num_classes {
            return Err(Error::Domain {
                op: "one_hot",
                index: i,
                value: c as f64,
            });
        }
        data[c as usize * hw + i] = 1.0;
    }
    Tensor::new(vec![num_classes, height, width], data)
}

/// What enters the auxiliary mapper for a task.
#[derive(Clone, Copy, Debug)]
pub enum AdapterValue<'a> {
    /// A prediction recorded on the tape.
    Prediction(Var),
    SegLabel {
        classes: &'a [u16],
        num_classes: usize,
        height: usize,
        width: usize,
    },
    /// Depth (`1×H×W`) or normal (`3×H×W`) ground truth.
    DenseLabel(&'a Tensor),
}

/// Encodes a prediction or label for the task's adapter: segmentation
/// predictions become probabilities and labels one-hot planes; depth and
/// normals pass through. Labels enter as constants.
pub fn task_to_adapter_input(tape: &mut Tape, task: Task, value: AdapterValue<'_>) -> Result<Var> {
    match (task, value) {
        (Task::Segmentation, AdapterValue::Prediction(v)) => {
            let l = tape.channel_log_softmax(v)?;
            tape.exp(l)
        }
        (_, AdapterValue::Prediction(v)) => Ok(v),
        (
            Task::Segmentation,
            AdapterValue::SegLabel {
                classes,
                num_classes,
                height,
                width,
            },
        ) => Ok(tape.constant(one_hot(classes, num_classes, height, width)?)),
        (Task::Depth | Task::Normal, AdapterValue::DenseLabel(t)) => {
            let (c, _, _) = t.chw()?;
            if c != task.channels(0) {
                return Err(Error::ShapeMismatch {
                    op: "task_to_adapter_input",
                    left: vec![c],
                    right: vec![task.channels(0)],
                });
            }
            Ok(tape.constant(t.clone()))
        }
        (task, _) => Err(Error::InvalidArgument(format!(
            "label kind does not match task {task}"
        ))),
    }
}

/// Adapter then shared trunk, at half the input resolution.
pub fn aux_map_forward(tape: &mut Tape, params: &ParamVars, task: Task, input: Var) -> Result<Var> {
    check_even(tape.value(input), "aux_map_forward")?;
    let x = tape.downsample_avg2x(input)?;
    let x = params.conv(tape, Layer::Adapter(task), x)?;
    let x = params.conv(tape, Layer::Trunk(0), x)?;
    let x = tape.relu(x)?;
    params.conv(tape, Layer::Trunk(1), x)
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            *x -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"RDC1";

/// Writes `RDC1`, a manifest (count; per tensor name length, name, rank,
/// extents) and the raw little-endian `f64` data.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in ModelParams::names().iter().zip(&params.tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for t in &params.tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not an RDC1 checkpoint"));
    }
    let count = r.u32()? as usize;
    let names = ModelParams::names();
    if count != names.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {count}", names.len()),
        ));
    }
    let mut shapes = Vec::with_capacity(count);
    for want in &names {
        let len = r.u32()? as usize;
        let name = r.take(len)?;
        if name != want.as_bytes() {
            return Err(Error::format(
                path,
                format!(
                    "expected tensor '{want}', found '{}'",
                    String::from_utf8_lossy(name)
                ),
            ));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(
                path,
                format!("tensor '{want}' has rank {rank}"),
            ));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    let num_classes = shapes[2 * Layer::Head(Task::Segmentation).slot() + 1]
        .first()
        .copied()
        .unwrap_or(0);
    if num_classes < 2 || shapes != ModelParams::expected_shapes(num_classes) {
        return Err(Error::format(
            path,
            "tensor shapes do not match the model layout",
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(path, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok(ModelParams {
        num_classes,
        tensors,
    })
}

#[cfg(test)]
mod tests;
