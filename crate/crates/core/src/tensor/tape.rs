//! Recorded forward sequence with per-op backward functions.
//!
//! Every op appends a node holding its output value and enough context to
//! run its backward half. [`Tape::backward`] walks the nodes in reverse
//! recording order, so gradients accumulate in a fixed order and are bitwise
//! reproducible.

use super::activation;
use super::conv::{self, ConvSpec};
use super::norm::{self, GroupStats};
use super::resize;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom single-input op.
pub type Vjp = Box<dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats,
    },
    Gelu(Var),
    Tanh(Var),
    Resize(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `x * s` with `s` a one-element tensor.
    ScaleBy { x: Var, s: Var },
    ScaleConst { x: Var, c: f64 },
    /// Per-channel `x * scale[c] + shift[c]` over `[C, H, W]`.
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Sum(Var),
    Custom { input: Var, vjp: Vjp },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that needs them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d(self.value(input), &spec, self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, spec }, rg))
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (out, stats) =
            norm::group_norm_with_stats(self.value(input), groups, self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::GroupNorm { input, gamma, beta, groups, stats }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = activation::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = activation::tanh(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Bilinear resize; returns `x` itself when the dims already match.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).chw("resize")?;
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = resize::bilinear_resize(self.value(x), out_h, out_w)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                axis: "scalar length",
                expected: 1,
                got: sv.len(),
            });
        }
        let out = self.value(x).scale(sv[0]);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, rg))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(out, Op::ScaleConst { x, c }, rg)
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.chw("channel_affine")?;
        for (t, axis) in [(scale, "scale length"), (shift, "shift length")] {
            let n = self.value(t).len();
            if n != c {
                return Err(Error::Dimension {
                    op: "channel_affine",
                    axis,
                    expected: c,
                    got: n,
                });
            }
        }
        let (sc, sh) = (self.value(scale), self.value(shift));
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| xv[i] * sc[i / hw] + sh[i / hw]);
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Sum of all elements as a one-element node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Records an op whose forward was computed by the caller.
    pub fn custom(&mut self, input: Var, value: Tensor, vjp: Vjp) -> Var {
        let rg = self.rg(input);
        self.push(value, Op::Custom { input, vjp }, rg)
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                axis: "root length",
                expected: 1,
                got: rv.len(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, gv: Tensor| -> Result<()> {
                if !self.rg(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(&gv),
                    slot @ None => {
                        *slot = Some(gv);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::Conv2d { input, weight, bias, spec } => {
                    let (gx, gw, gb) =
                        conv::conv2d_backward(self.value(*input), spec, self.value(*weight), self.value(*bias), &g)?;
                    send(*input, gx)?;
                    send(*weight, gw)?;
                    send(*bias, gb)?;
                }
                Op::GroupNorm { input, gamma, beta, groups, stats } => {
                    let (gx, gg, gb) =
                        norm::group_norm_backward(self.value(*input), *groups, self.value(*gamma), stats, &g)?;
                    send(*input, gx)?;
                    send(*gamma, gg)?;
                    send(*beta, gb)?;
                }
                Op::Gelu(x) => send(*x, activation::gelu_backward(self.value(*x), &g))?,
                Op::Tanh(x) => send(*x, activation::tanh_backward(&node.value, &g))?,
                Op::Resize(x) => send(*x, resize::bilinear_resize_backward(self.value(*x).shape(), &g)?)?,
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Mul(a, b) => {
                    send(*a, g.mul(self.value(*b))?)?;
                    send(*b, g.mul(self.value(*a))?)?;
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.value(*s)[0];
                    let gs: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    send(*x, g.scale(sv))?;
                    send(*s, Tensor::scalar(gs))?;
                }
                Op::ScaleConst { x, c } => send(*x, g.scale(*c))?,
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.chw("channel_affine")?;
                    let hw = h * w;
                    let sc = self.value(*scale);
                    let mut gsc = vec![0.0; c];
                    let mut gsh = vec![0.0; c];
                    for ch in 0..c {
                        for i in ch * hw..(ch + 1) * hw {
                            gsc[ch] += g[i] * xv[i];
                            gsh[ch] += g[i];
                        }
                    }
                    send(*x, Tensor::from_fn(xv.shape(), |i| g[i] * sc[i / hw]))?;
                    send(*scale, Tensor::new(&[c], gsc)?)?;
                    send(*shift, Tensor::new(&[c], gsh)?)?;
                }
                Op::Sum(x) => send(*x, Tensor::full(self.value(*x).shape(), g[0]))?,
                Op::Custom { input, vjp } => send(*input, vjp(&g)?)?,
            }
        }
        Ok(Gradients { grads })
    }
}
