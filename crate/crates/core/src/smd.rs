//! Structure-modulated decoder: modulation map, preservation gate, text-space
//! projector, and the Dice + BCE segmentation loss.

use rand::Rng;
use serde::Serialize;

use crate::block::{conv_weight, ConvNorm, LeafFn};
use crate::error::{Error, Result};
use crate::tensor::activation::sigmoid_scalar;
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Dice smoothing.
pub const DICE_EPS: f64 = 1.0;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct SmdParams<T = Tensor> {
    pub channels: usize,
    pub teacher_channels: usize,
    pub embed_dim: usize,
    /// Stride-2 3x3 downsampling `C_t -> C`.
    pub down: ConvNorm<T>,
    /// One-element gate scale.
    pub gamma: T,
    /// 1x1 projection `C -> D`.
    pub proj_weight: T,
    pub proj_bias: T,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Grouped as finely as the channel counts allow; depthwise when `C_t == C`.
pub fn down_spec(teacher_channels: usize, channels: usize) -> ConvSpec {
    ConvSpec {
        in_channels: teacher_channels,
        out_channels: channels,
        kernel_size: 3,
        stride: 2,
        padding: 1,
        groups: gcd(teacher_channels, channels),
    }
}

pub fn proj_spec(channels: usize, embed_dim: usize) -> ConvSpec {
    ConvSpec::pointwise(channels, embed_dim)
}

impl SmdParams<Tensor> {
    /// The gate starts closed (`gamma = 0`).
    pub fn init<R: Rng + ?Sized>(channels: usize, teacher_channels: usize, embed_dim: usize, rng: &mut R) -> Self {
        let ps = proj_spec(channels, embed_dim);
        SmdParams {
            channels,
            teacher_channels,
            embed_dim,
            down: ConvNorm::init(&down_spec(teacher_channels, channels), rng),
            gamma: Tensor::zeros(&[1]),
            proj_weight: conv_weight(&ps, rng),
            proj_bias: Tensor::zeros(&[embed_dim]),
        }
    }

    pub fn constants(&self, tape: &mut Tape) -> Result<SmdParams<Var>> {
        self.try_map(&mut |_, t| Ok(tape.constant(t.clone())))
    }
}

impl<T> SmdParams<T> {
    pub fn try_map<U>(&self, f: &mut LeafFn<'_, T, U>) -> Result<SmdParams<U>> {
        Ok(SmdParams {
            channels: self.channels,
            teacher_channels: self.teacher_channels,
            embed_dim: self.embed_dim,
            down: self.down.try_map("smd.down", f)?,
            gamma: f("smd.gate.gamma".into(), &self.gamma)?,
            proj_weight: f("smd.proj.weight".into(), &self.proj_weight)?,
            proj_bias: f("smd.proj.bias".into(), &self.proj_bias)?,
        })
    }
}

/// `GELU(GroupNorm(conv_s2(F_Middle)))`, half the input resolution.
pub fn modulate_on(tape: &mut Tape, f_middle: Var, p: &SmdParams<Var>) -> Result<Var> {
    let (_, h, w) = tape.value(f_middle).chw("modulate")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "modulate: spatial dims must be even, got {h}x{w}"
        )));
    }
    let y = p
        .down
        .apply(tape, f_middle, down_spec(p.teacher_channels, p.channels))?;
    Ok(tape.gelu(y))
}

/// `F' + gamma * (F' * tanh(M))` with `F'` the top layer resized to `M`'s grid.
pub fn gate_on(tape: &mut Tape, f_top: Var, m: Var, gamma: Var) -> Result<Var> {
    let (_, h, w) = tape.value(m).chw("preservation_gate")?;
    let base = tape.resize(f_top, h, w)?;
    let t = tape.tanh(m);
    let prod = tape.mul(base, t)?;
    let scaled = tape.scale_by(prod, gamma)?;
    tape.add(base, scaled)
}

pub fn project_on(tape: &mut Tape, f_out: Var, p: &SmdParams<Var>) -> Result<Var> {
    let (c, _, _) = tape.value(f_out).chw("project")?;
    if c != p.channels {
        return Err(Error::Config(format!(
            "project: expected {} input channels, got {c}",
            p.channels
        )));
    }
    tape.conv2d(f_out, p.proj_weight, p.proj_bias, proj_spec(p.channels, p.embed_dim))
}

pub fn modulate(f_middle: &Tensor, params: &SmdParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f_middle.clone());
    let p = params.constants(&mut tape)?;
    let out = modulate_on(&mut tape, x, &p)?;
    Ok(tape.value(out).clone())
}

pub fn preservation_gate(f_top: &Tensor, m: &Tensor, gamma: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(f_top.clone());
    let mv = tape.constant(m.clone());
    let g = tape.constant(Tensor::scalar(gamma));
    let out = gate_on(&mut tape, f, mv, g)?;
    Ok(tape.value(out).clone())
}

pub fn project(f_out: &Tensor, params: &SmdParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f_out.clone());
    let p = params.constants(&mut tape)?;
    let out = project_on(&mut tape, x, &p)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegLossBreakdown {
    pub dice: f64,
    pub bce: f64,
    pub total: f64,
}

/// Rejects anything but exact 0/1 mask values.
pub fn check_binary(masks: &Tensor) -> Result<()> {
    if let Some(i) = masks.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!(
            "mask value {} at {:?} is not binary",
            masks[i],
            masks.unravel(i)
        )));
    }
    Ok(())
}

/// Loss values plus the gradient of the total with respect to the logits.
fn seg_terms(logits: &Tensor, masks: &Tensor) -> Result<(SegLossBreakdown, Tensor)> {
    logits.expect_same_shape(masks, "seg_loss")?;
    check_binary(masks)?;
    let (m, h, w) = logits.chw("seg_loss")?;
    if let Some(loc) = logits.first_non_finite() {
        return Err(Error::NonFinite {
            name: "logits".into(),
            location: Some(loc),
        });
    }
    let hw = h * w;
    let n = (m * hw) as f64;
    let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid_scalar(z)).collect();
    let mut grad = Tensor::zeros(logits.shape());
    let mut dice = 0.0;
    let mut bce = 0.0;
    for j in 0..m {
        let r = j * hw..(j + 1) * hw;
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for i in r.clone() {
            inter += p[i] * masks[i];
            sp += p[i];
            sg += masks[i];
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sp + sg + DICE_EPS;
        dice += 1.0 - num / den;
        for i in r {
            let g = masks[i];
            let pc = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
            let dp = p[i] * (1.0 - p[i]);
            let d_dice = -(2.0 * g * den - num) / (den * den) / m as f64;
            let d_bce = if p[i] > BCE_CLAMP && p[i] < 1.0 - BCE_CLAMP {
                (p[i] - g) / n
            } else {
                0.0
            };
            grad[i] = d_dice * dp + d_bce;
        }
    }
    let dice = dice / m as f64;
    let bce = bce / n;
    Ok((
        SegLossBreakdown {
            dice,
            bce,
            total: dice + bce,
        },
        grad,
    ))
}

/// Dice (averaged over categories) plus mean binary cross-entropy.
pub fn seg_loss(logits: &Tensor, masks: &Tensor) -> Result<SegLossBreakdown> {
    Ok(seg_terms(logits, masks)?.0)
}

/// Records the segmentation loss; masks are constants.
pub fn seg_loss_on(tape: &mut Tape, logits: Var, masks: &Tensor) -> Result<(Var, SegLossBreakdown)> {
    let (b, grad) = seg_terms(tape.value(logits), masks)?;
    let var = tape.custom(logits, Tensor::scalar(b.total), Box::new(move |g| Ok(grad.scale(g[0]))));
    Ok((var, b))
}
