//! Parameter containers shared by the encoder and decoder.
//!
//! Parameter structs are generic over the leaf type: `Tensor` for stored
//! values, [`Var`] once bound to a [`Tape`]. `try_map` walks the leaves in a
//! fixed order with dotted names, which is what checkpoints and the
//! parameter store key on.

use rand::Rng;

use crate::error::Result;
use crate::tensor::norm::default_groups;
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Group-norm epsilon used by every block.
pub const GN_EPS: f64 = 1e-5;

/// Leaf visitor: `(dotted name, leaf) -> new leaf`.
pub type LeafFn<'a, T, U> = dyn FnMut(String, &T) -> Result<U> + 'a;

/// Convolution followed by group normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNorm<T> {
    pub weight: T,
    pub bias: T,
    pub gamma: T,
    pub beta: T,
}

impl ConvNorm<Tensor> {
    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias, identity affine.
    pub fn init<R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> Self {
        ConvNorm {
            weight: conv_weight(spec, rng),
            bias: Tensor::zeros(&[spec.out_channels]),
            gamma: Tensor::ones(&[spec.out_channels]),
            beta: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

impl<T> ConvNorm<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut LeafFn<'_, T, U>) -> Result<ConvNorm<U>> {
        Ok(ConvNorm {
            weight: f(format!("{prefix}.weight"), &self.weight)?,
            bias: f(format!("{prefix}.bias"), &self.bias)?,
            gamma: f(format!("{prefix}.gn_gamma"), &self.gamma)?,
            beta: f(format!("{prefix}.gn_beta"), &self.beta)?,
        })
    }
}

impl ConvNorm<Var> {
    /// `GroupNorm(conv(x))` with the default group count.
    pub fn apply(&self, tape: &mut Tape, x: Var, spec: ConvSpec) -> Result<Var> {
        let y = tape.conv2d(x, self.weight, self.bias, spec)?;
        tape.group_norm(y, self.gamma, self.beta, default_groups(spec.out_channels), GN_EPS)
    }
}

pub fn conv_weight<R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> Tensor {
    Tensor::uniform(&spec.weight_shape(), 1.0 / (spec.fan_in() as f64).sqrt(), rng)
}
