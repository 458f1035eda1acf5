use super::ops;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint rule for an op whose forward value was computed outside the tape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Given the gradient of the loss with respect to `output`, return the
    /// gradient for each input. Entries for inputs with `needs[i] == false`
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>>;

    /// Appends the branch pattern of any non-differentiable points (abs, max)
    /// crossed in the forward pass.
    fn kink_pattern(&self, _out: &mut Vec<bool>) {}
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Relu(Var),
    Sum(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Down2x(Var),
    Up2x(Var),
    LogSoftmax(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-threaded record of forward ops, replayed in reverse by
/// [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Gradients are only tracked for leaves with
    /// `requires_grad` and the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{op} produced {} at index {i}",
                t.data()[i]
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, name)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Self::check_finite(&out, name)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Self::check_finite(&out, name)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| x <= 0.0 || x.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "neg", |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let out = Tensor::scalar(s);
        Self::check_finite(&out, "sum")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k1], &[k2, n]) if k1 == k2 => (m, k1, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
        };
        let data = ops::matmul(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// 3×3 convolution, zero padding 1, stride 1.
    pub fn conv2d_3x3(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let (cin, h, w) = ti.chw()?;
        let cout = match tk.shape() {
            &[co, ci, 3, 3] if ci == cin => co,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d_3x3",
                    left: ti.shape().to_vec(),
                    right: tk.shape().to_vec(),
                })
            }
        };
        if tb.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_3x3 bias",
                left: vec![cout],
                right: tb.shape().to_vec(),
            });
        }
        let data = ops::conv3x3_forward(ti.data(), tk.data(), tb.data(), cin, cout, h, w);
        let out = Tensor::new(vec![cout, h, w], data)?;
        Self::check_finite(&out, "conv2d_3x3")?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    pub fn downsample_avg2x(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (c, h, w) = ta.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "downsample_avg2x needs even extents, got {h}×{w}"
            )));
        }
        let data = ops::down2x(ta.data(), c, h, w);
        let out = Tensor::new(vec![c, h / 2, w / 2], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Down2x(a), rg))
    }

    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (c, h, w) = ta.chw()?;
        let data = ops::up2x(ta.data(), c, h, w);
        let out = Tensor::new(vec![c, 2 * h, 2 * w], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Up2x(a), rg))
    }

    /// Per-pixel log-softmax over the channel axis of an L×H×W tensor.
    pub fn channel_log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (l, h, w) = ta.chw()?;
        Self::check_finite(ta, "channel_log_softmax input")?;
        let data = ops::log_softmax_channels(ta.data(), l, h * w);
        let out = Tensor::new(vec![l, h, w], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Records an op whose forward value `output` was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        Self::check_finite(&output, op.name())?;
        let rg = self.rg(inputs);
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Branch pattern of every kink (relu sign, custom abs/max choices) in
    /// the recorded forward pass. Two evaluations with equal patterns lie on
    /// the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0)),
                Op::Custom { op, .. } => op.kink_pattern(&mut out),
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from a one-element node. Clears gradients of a previous
    /// pass first.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        self.nodes[out.0].grad = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &g)?;
            self.nodes[idx].grad = Some(g);
            for (v, dv) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<f64>| {
            if rg(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                emit(*b, &|| g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => emit(*a, &|| g.iter().map(|x| x * c).collect()),
            Op::Exp(a) => emit(*a, &|| {
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect()
            }),
            Op::Log(a) => emit(*a, &|| g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Neg(a) => emit(*a, &|| g.iter().map(|x| -x).collect()),
            Op::Relu(a) => emit(*a, &|| {
                g.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            }),
            Op::Sum(a) => emit(*a, &|| vec![g[0]; val(*a).len()]),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                emit(*a, &|| ops::matmul_a_bt(g, val(*b), m, n, k));
                emit(*b, &|| ops::matmul_at_b(val(*a), g, m, k, n));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (cin, h, w) = self.nodes[input.0].value.chw()?;
                let cout = node.value.shape()[0];
                emit(*input, &|| {
                    ops::conv3x3_grad_input(g, val(*kernel), cin, cout, h, w)
                });
                emit(*kernel, &|| {
                    ops::conv3x3_grad_kernel(g, val(*input), cin, cout, h, w)
                });
                emit(*bias, &|| {
                    g.chunks_exact(h * w).map(|c| c.iter().sum()).collect()
                });
            }
            Op::Down2x(a) => {
                let (c, h, w) = self.nodes[a.0].value.chw()?;
                emit(*a, &|| ops::down2x_grad(g, c, h, w));
            }
            Op::Up2x(a) => {
                let (c, h, w) = self.nodes[a.0].value.chw()?;
                emit(*a, &|| ops::up2x_grad(g, c, h, w));
            }
            Op::LogSoftmax(a) => {
                let (l, h, w) = node.value.chw()?;
                emit(*a, &|| {
                    ops::log_softmax_grad(g, node.value.data(), l, h * w)
                });
            }
            Op::Custom { inputs, op } => {
                let needs: Vec<bool> = inputs.iter().map(|&v| rg(v)).collect();
                if needs.iter().any(|&n| n) {
                    let vals: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let grads = op.backward(&vals, &node.value, g, &needs)?;
                    if grads.len() != inputs.len() {
                        return Err(Error::InvalidArgument(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            grads.len(),
                            inputs.len()
                        )));
                    }
                    for ((&v, gv), need) in inputs.iter().zip(grads).zip(needs) {
                        if let (true, Some(gv)) = (need, gv) {
                            debug_assert_eq!(
                                gv.len(),
                                self.nodes[v.0].value.len(),
                                "{}",
                                op.name()
                            );
                            out.push((v, gv));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
impl Var {
    pub(crate) fn from_index_for_tests(i: usize) -> Self {
        Var(i)
    }
}
