//! Structure-aware encoder: gated multi-layer fusion, depthwise refinement,
//! and a 2x upsampling projection into the teacher feature space.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::block::{conv_weight, ConvNorm, LeafFn};
use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, TOP_LAYER};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// One shallow layer's contribution `alpha * GroupNorm(conv1x1(F))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBranch<T> {
    pub layer: usize,
    /// One-element gate.
    pub alpha: T,
    pub transform: ConvNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T = Tensor> {
    pub channels: usize,
    pub teacher_channels: usize,
    pub fusion: Vec<FusionBranch<T>>,
    pub refine1: ConvNorm<T>,
    pub refine2: ConvNorm<T>,
    /// 3x3 convolution `C -> C_t` after upsampling.
    pub out_weight: T,
    pub out_bias: T,
}

pub fn fusion_spec(channels: usize) -> ConvSpec {
    ConvSpec::pointwise(channels, channels)
}

pub fn refine_spec(channels: usize) -> ConvSpec {
    ConvSpec::depthwise3x3(channels)
}

pub fn out_spec(channels: usize, teacher_channels: usize) -> ConvSpec {
    ConvSpec::same3x3(channels, teacher_channels, 1)
}

impl SaeParams<Tensor> {
    /// Gates start at zero so the fused map starts as the top layer.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        teacher_channels: usize,
        fusion_layers: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(&l) = fusion_layers.iter().find(|&&l| l == TOP_LAYER || l == 0) {
            return Err(Error::Config(format!("layer {l} cannot be a fusion branch")));
        }
        let fusion = fusion_layers
            .iter()
            .map(|&layer| FusionBranch {
                layer,
                alpha: Tensor::zeros(&[1]),
                transform: ConvNorm::init(&fusion_spec(channels), rng),
            })
            .collect();
        let refine1 = ConvNorm::init(&refine_spec(channels), rng);
        let refine2 = ConvNorm::init(&refine_spec(channels), rng);
        let os = out_spec(channels, teacher_channels);
        Ok(SaeParams {
            channels,
            teacher_channels,
            fusion,
            refine1,
            refine2,
            out_weight: conv_weight(&os, rng),
            out_bias: Tensor::zeros(&[teacher_channels]),
        })
    }

    /// Binds every parameter as a tape constant.
    pub fn constants(&self, tape: &mut Tape) -> Result<SaeParams<Var>> {
        self.try_map(&mut |_, t| Ok(tape.constant(t.clone())))
    }
}

impl<T> SaeParams<T> {
    pub fn try_map<U>(&self, f: &mut LeafFn<'_, T, U>) -> Result<SaeParams<U>> {
        let mut fusion = Vec::with_capacity(self.fusion.len());
        for b in &self.fusion {
            let prefix = format!("sae.fuse.l{:02}", b.layer);
            fusion.push(FusionBranch {
                layer: b.layer,
                alpha: f(format!("{prefix}.alpha"), &b.alpha)?,
                transform: b.transform.try_map(&prefix, f)?,
            });
        }
        Ok(SaeParams {
            channels: self.channels,
            teacher_channels: self.teacher_channels,
            fusion,
            refine1: self.refine1.try_map("sae.refine1", f)?,
            refine2: self.refine2.try_map("sae.refine2", f)?,
            out_weight: f("sae.out.weight".into(), &self.out_weight)?,
            out_bias: f("sae.out.bias".into(), &self.out_bias)?,
        })
    }

    pub fn fusion_layers(&self) -> Vec<usize> {
        self.fusion.iter().map(|b| b.layer).collect()
    }
}

/// `F_top + sum_i alpha_i * GroupNorm(conv1x1(F_i))` on the tape.
pub fn fuse_on(tape: &mut Tape, layers: &BTreeMap<usize, Var>, p: &SaeParams<Var>) -> Result<Var> {
    let layer = |l: usize| {
        layers
            .get(&l)
            .copied()
            .ok_or_else(|| Error::Config(format!("feature pyramid has no layer {l}")))
    };
    let mut acc = layer(TOP_LAYER)?;
    for b in &p.fusion {
        let x = layer(b.layer)?;
        let g = b.transform.apply(tape, x, fusion_spec(p.channels))?;
        let g = tape.scale_by(g, b.alpha)?;
        acc = tape.add(acc, g)?;
    }
    Ok(acc)
}

/// Two `GELU(GroupNorm(depthwise3x3))` layers, 2x bilinear upsample, then
/// the 3x3 projection to teacher width.
pub fn encode_on(tape: &mut Tape, f_hat: Var, p: &SaeParams<Var>) -> Result<Var> {
    let (c, h, w) = tape.value(f_hat).chw("encode")?;
    if c != p.channels {
        return Err(Error::Dimension {
            op: "encode",
            axis: "input channels",
            expected: p.channels,
            got: c,
        });
    }
    let mut x = f_hat;
    for layer in [&p.refine1, &p.refine2] {
        let y = layer.apply(tape, x, refine_spec(c))?;
        x = tape.gelu(y);
    }
    let up = tape.resize(x, 2 * h, 2 * w)?;
    tape.conv2d(up, p.out_weight, p.out_bias, out_spec(c, p.teacher_channels))
}

pub fn gated_fusion(pyramid: &FeaturePyramid, params: &SaeParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut layers = BTreeMap::new();
    for (l, t) in pyramid.iter() {
        layers.insert(l, tape.constant(t.clone()));
    }
    let p = params.constants(&mut tape)?;
    let out = fuse_on(&mut tape, &layers, &p)?;
    Ok(tape.value(out).clone())
}

/// `F_Middle` from a fused map.
pub fn encode(f_hat: &Tensor, params: &SaeParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f_hat.clone());
    let p = params.constants(&mut tape)?;
    let out = encode_on(&mut tape, x, &p)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignLossBreakdown {
    pub cosine: f64,
    pub mse: f64,
    pub total: f64,
}

fn norm_at(t: &Tensor, c: usize, hw: usize, p: usize) -> f64 {
    (0..c).map(|k| t[k * hw + p] * t[k * hw + p]).sum::<f64>().sqrt()
}

/// Loss values plus the gradient of the total with respect to `f_middle`.
fn align_terms(f_middle: &Tensor, teacher: &Tensor) -> Result<(AlignLossBreakdown, Tensor)> {
    f_middle.expect_same_shape(teacher, "align_loss")?;
    let (c, h, w) = f_middle.chw("align_loss")?;
    let hw = h * w;
    let locs = hw as f64;
    let n = (c * hw) as f64;
    let mut grad = Tensor::zeros(f_middle.shape());
    let mut cos_sum = 0.0;
    let mut sq_sum = 0.0;
    for p in 0..hw {
        let na = norm_at(f_middle, c, hw, p);
        let nb = norm_at(teacher, c, hw, p);
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate {
                op: "align_loss",
                location: Some(vec![p / w, p % w]),
                reason: format!(
                    "zero-norm {} feature vector",
                    if na != 0.0 { "teacher" } else { "student" }
                ),
            });
        }
        let dot: f64 = (0..c).map(|k| f_middle[k * hw + p] * teacher[k * hw + p]).sum();
        let cos = dot / (na * nb);
        cos_sum += 1.0 - cos;
        for k in 0..c {
            let i = k * hw + p;
            let (a, b) = (f_middle[i], teacher[i]);
            let dcos = b / (na * nb) - cos * a / (na * na);
            grad[i] = -dcos / locs + 2.0 * (a - b) / n;
        }
    }
    for (a, b) in f_middle.data().iter().zip(teacher.data()) {
        sq_sum += (a - b) * (a - b);
    }
    let cosine = cos_sum / locs;
    let mse = sq_sum / n;
    Ok((
        AlignLossBreakdown {
            cosine,
            mse,
            total: cosine + mse,
        },
        grad,
    ))
}

/// Mean over locations of `1 - cos` plus mean squared error.
pub fn align_loss(f_middle: &Tensor, teacher: &Tensor) -> Result<AlignLossBreakdown> {
    Ok(align_terms(f_middle, teacher)?.0)
}

/// Records the alignment loss; the teacher is a constant.
pub fn align_loss_on(tape: &mut Tape, f_middle: Var, teacher: &Tensor) -> Result<(Var, AlignLossBreakdown)> {
    let (b, grad) = align_terms(tape.value(f_middle), teacher)?;
    let var = tape.custom(f_middle, Tensor::scalar(b.total), Box::new(move |g| Ok(grad.scale(g[0]))));
    Ok((var, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::activation::gelu;
    use crate::tensor::conv::conv2d;
    use crate::tensor::norm::{default_groups, group_norm};
    use crate::tensor::resize::bilinear_resize;
    use crate::tensor::{grad_check_with, FdScheme};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    fn pyramid(layers: &[usize], c: usize, h: usize, r: &mut Xoshiro256PlusPlus) -> FeaturePyramid {
        FeaturePyramid::from_layers(layers.iter().map(|&l| (l, Tensor::randn(&[c, h, h], r)))).unwrap()
    }

    fn randomize(p: &mut SaeParams, r: &mut Xoshiro256PlusPlus) {
        for b in &mut p.fusion {
            b.alpha = Tensor::uniform(&[1], 1.0, r);
            b.transform.gamma = Tensor::uniform(&[p.channels], 1.5, r);
            b.transform.beta = Tensor::uniform(&[p.channels], 0.5, r);
            b.transform.bias = Tensor::uniform(&[p.channels], 0.5, r);
        }
    }

    #[test]
    fn zero_gates_return_top_layer_bitwise() {
        let mut r = rng(0);
        let pyr = pyramid(&[2, 4, 6, 8, 10, 12], 4, 4, &mut r);
        let p = SaeParams::init(4, 2, &[2, 4, 6, 8, 10], &mut r).unwrap();
        let out = gated_fusion(&pyr, &p).unwrap();
        let top = pyr.get(12).unwrap();
        assert!(out.data().iter().zip(top.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unit_gate_identity_transform_adds_normalized_layer() {
        let mut r = rng(1);
        let c = 4;
        // Each group already zero-mean, unit-variance.
        let f2 = Tensor::from_fn(&[c, 4, 4], |i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 });
        let f12 = Tensor::randn(&[c, 4, 4], &mut r);
        let pyr = FeaturePyramid::from_layers([(2, f2.clone()), (12, f12.clone())]).unwrap();
        let mut p = SaeParams::init(c, 2, &[2], &mut r).unwrap();
        p.fusion[0].alpha = Tensor::ones(&[1]);
        p.fusion[0].transform.weight = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let out = gated_fusion(&pyr, &p).unwrap();
        let expect = f12.add(&f2).unwrap();
        let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
        for i in 0..out.len() {
            assert!((out[i] - (f12[i] + f2[i] * scale)).abs() < 1e-12);
            assert!((out[i] - expect[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn fusion_matches_composed_ops() {
        let mut r = rng(2);
        let c = 4;
        let pyr = pyramid(&[6, 8, 10, 12], c, 5, &mut r);
        let mut p = SaeParams::init(c, 2, &[6, 8, 10], &mut r).unwrap();
        randomize(&mut p, &mut r);
        let out = gated_fusion(&pyr, &p).unwrap();
        let mut expect = pyr.get(12).unwrap().clone();
        for b in &p.fusion {
            let t = &b.transform;
            let y = conv2d(pyr.get(b.layer).unwrap(), &fusion_spec(c), &t.weight, &t.bias).unwrap();
            let y = group_norm(&y, default_groups(c), &t.gamma, &t.beta, 1e-5).unwrap();
            expect = expect.add(&y.scale(b.alpha[0])).unwrap();
        }
        assert!(out.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn missing_layer_is_named() {
        let mut r = rng(3);
        let pyr = pyramid(&[2, 12], 4, 4, &mut r);
        let p = SaeParams::init(4, 2, &[2, 4], &mut r).unwrap();
        let e = gated_fusion(&pyr, &p).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("layer 4")), "{e}");
    }

    #[test]
    fn encode_matches_composed_ops_and_zero_propagates() {
        let mut r = rng(4);
        let (c, ct) = (4, 6);
        let p = SaeParams::init(c, ct, &[2], &mut r).unwrap();
        let zero = encode(&Tensor::zeros(&[c, 4, 4]), &p).unwrap();
        assert_eq!(zero.shape(), &[ct, 8, 8]);
        assert_eq!(zero.max_abs(), 0.0);

        let x = Tensor::randn(&[c, 4, 4], &mut r);
        let out = encode(&x, &p).unwrap();
        let mut y = x.clone();
        for l in [&p.refine1, &p.refine2] {
            y = conv2d(&y, &refine_spec(c), &l.weight, &l.bias).unwrap();
            y = gelu(&group_norm(&y, default_groups(c), &l.gamma, &l.beta, 1e-5).unwrap());
        }
        let y = bilinear_resize(&y, 8, 8).unwrap();
        let y = conv2d(&y, &out_spec(c, ct), &p.out_weight, &p.out_bias).unwrap();
        assert!(out.sub(&y).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn encode_of_constant_is_constant_per_channel_in_interior() {
        let mut r = rng(5);
        let c = 4;
        let mut p = SaeParams::init(c, 3, &[2], &mut r).unwrap();
        // Identity depthwise kernels.
        for l in [&mut p.refine1, &mut p.refine2] {
            l.weight = Tensor::from_fn(&[c, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        }
        let x = Tensor::from_fn(&[c, 4, 4], |i| (i / 16) as f64);
        let out = encode(&x, &p).unwrap();
        for ch in 0..3 {
            let v = out[ch * 64 + 9];
            for hh in 1..7 {
                for ww in 1..7 {
                    assert!((out[ch * 64 + hh * 8 + ww] - v).abs() < 1e-12);
                }
            }
        }
    }

    fn oracle_align(a: &Tensor, b: &Tensor) -> (f64, f64) {
        let (c, h, w) = a.chw("").unwrap();
        let mut cos = 0.0;
        let mut mse = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (mut d, mut na, mut nb, mut sq) = (0.0, 0.0, 0.0, 0.0);
                for k in 0..c {
                    let (u, v) = (a[(k * h + y) * w + x], b[(k * h + y) * w + x]);
                    d += u * v;
                    na += u * u;
                    nb += v * v;
                    sq += (u - v) * (u - v);
                }
                cos += 1.0 - d / (na.sqrt() * nb.sqrt());
                mse += sq / c as f64;
            }
        }
        let l = (h * w) as f64;
        (cos / l, mse / l)
    }

    #[test]
    fn align_loss_anchors_and_oracle() {
        let mut r = rng(6);
        let t = Tensor::randn(&[8, 4, 4], &mut r);
        let same = align_loss(&t, &t).unwrap();
        assert!(same.cosine.abs() < 1e-12 && same.mse == 0.0 && same.total.abs() < 1e-12);

        let anti = align_loss(&t.scale(-1.0), &t).unwrap();
        let mean4: f64 = t.data().iter().map(|v| 4.0 * v * v).sum::<f64>() / t.len() as f64;
        assert!((anti.cosine - 2.0).abs() < 1e-12);
        assert!((anti.mse - mean4).abs() < 1e-12);

        for _ in 0..10 {
            let a = Tensor::randn(&[8, 4, 4], &mut r);
            let b = Tensor::randn(&[8, 4, 4], &mut r);
            let got = align_loss(&a, &b).unwrap();
            let (c, m) = oracle_align(&a, &b);
            assert!((got.cosine - c).abs() < 1e-12 && (got.mse - m).abs() < 1e-12);
            assert!((got.total - (got.cosine + got.mse)).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&got.cosine));
        }
    }

    #[test]
    fn cosine_is_scale_invariant_but_mse_is_not() {
        let mut r = rng(7);
        let a = Tensor::randn(&[4, 3, 3], &mut r);
        let b = Tensor::randn(&[4, 3, 3], &mut r);
        // Positive per-location scaling.
        let s = Tensor::from_fn(&[4, 3, 3], |i| 0.5 + (i % 9) as f64);
        let l0 = align_loss(&a, &b).unwrap();
        let l1 = align_loss(&a.mul(&s).unwrap(), &b).unwrap();
        assert!((l0.cosine - l1.cosine).abs() < 1e-12);
        assert!((l0.mse - l1.mse).abs() > 1e-3);
    }

    #[test]
    fn zero_vector_location_is_reported() {
        let mut r = rng(8);
        let mut a = Tensor::randn(&[3, 2, 3], &mut r);
        for k in 0..3 {
            a[k * 6 + 4] = 0.0;
        }
        let b = Tensor::randn(&[3, 2, 3], &mut r);
        match align_loss(&a, &b) {
            Err(Error::Degenerate { location, .. }) => assert_eq!(location, Some(vec![1, 1])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encoder_gradients_pass_check() {
        for seed in 0..3 {
            let mut r = rng(100 + seed);
            let (c, ct) = (4, 3);
            let pyr = pyramid(&[8, 10, 12], c, 4, &mut r);
            let teacher = Tensor::randn(&[ct, 8, 8], &mut r);
            let mut p = SaeParams::init(c, ct, &[8, 10], &mut r).unwrap();
            randomize(&mut p, &mut r);
            let mut names = Vec::new();
            let mut values = Vec::new();
            p.try_map(&mut |n, t| {
                names.push(n);
                values.push(t.clone());
                Ok(())
            })
            .unwrap();
            let params: Vec<(String, Tensor)> = names.into_iter().zip(values).collect();
            let report = grad_check_with(
                "sae+align",
                |tape, vars| {
                    let mut it = vars.iter().copied();
                    let pv = p.try_map(&mut |_, _| Ok(it.next().unwrap()))?;
                    let layers = pyr.iter().map(|(l, t)| (l, tape.constant(t.clone()))).collect();
                    let f_hat = fuse_on(tape, &layers, &pv)?;
                    let mid = encode_on(tape, f_hat, &pv)?;
                    Ok(align_loss_on(tape, mid, &teacher)?.0)
                },
                &params,
                1e-4,
                FdScheme::Richardson,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}
