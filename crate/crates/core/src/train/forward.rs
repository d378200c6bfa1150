//! The composed objective and gradient routing.

use std::collections::BTreeMap;

use serde::Serialize;

use super::model::{Group, ModelParams, ParamStore};
use super::TrainConfig;
use crate::error::{Error, Result, StageExt};
use crate::io::SceneSample;
use crate::pyramid::TOP_LAYER;
use crate::sae::{align_loss_on, encode_on, fuse_on};
use crate::seghead::{argmax_labels, similarity_on, SegmentationMap, TextEmbeddingBank};
use crate::smd::{gate_on, modulate_on, project_on, seg_loss_on};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Default temperature on cosine scores.
pub const LOGIT_SCALE: f64 = 10.0;

/// What the decoder's modulation branch consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInput {
    /// The encoder output.
    Encoded,
    /// The sample's teacher features in place of the encoder output.
    Teacher,
}

/// Loss terms of one sample. Disabled terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub dice: f64,
    pub bce: f64,
    pub seg: f64,
    /// `align_weight * align + seg_weight * seg`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, o: &LossBreakdown) {
        self.align += o.align;
        self.dice += o.dice;
        self.bce += o.bce;
        self.seg += o.seg;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            align: self.align * s,
            dice: self.dice * s,
            bce: self.bce * s,
            seg: self.seg * s,
            total: self.total * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.align, self.dice, self.bce, self.seg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Adapted pyramid layers, the adapted top layer, and the encoder output.
pub fn encoder_on(
    tape: &mut Tape,
    sample: &SceneSample,
    p: &ModelParams<Var>,
    layers: &[usize],
) -> Result<(Var, Option<Var>)> {
    let mut map = BTreeMap::new();
    for &l in layers {
        let mut v = tape.constant(sample.pyramid.get(l)?.clone());
        if let Some(a) = p.adapters.iter().find(|a| a.layer == l) {
            v = tape.channel_affine(v, a.scale, a.shift).stage("adapter")?;
        }
        map.insert(l, v);
    }
    let f_top = *map
        .get(&TOP_LAYER)
        .ok_or_else(|| Error::Config(format!("layer set {layers:?} lacks layer {TOP_LAYER}")))?;
    let f_mid = match &p.sae {
        Some(s) => {
            let f_hat = fuse_on(tape, &map, s).stage("fusion")?;
            Some(encode_on(tape, f_hat, s).stage("encoder")?)
        }
        None => None,
    };
    Ok((f_top, f_mid))
}

/// Modulation, gate, projection, upsampling to the image grid, and scaled
/// cosine scores against the bank. Returns `[M, H_img, W_img]` logits.
#[allow(clippy::too_many_arguments)]
pub fn decoder_on(
    tape: &mut Tape,
    f_top: Var,
    input: Option<Var>,
    p: &ModelParams<Var>,
    no_gate: bool,
    bank: &TextEmbeddingBank,
    image: (usize, usize),
    logit_scale: f64,
) -> Result<Var> {
    let f_out = match input {
        Some(x) => {
            let m = modulate_on(tape, x, &p.smd).stage("modulate")?;
            if no_gate {
                m
            } else {
                gate_on(tape, f_top, m, p.smd.gamma).stage("gate")?
            }
        }
        None => f_top,
    };
    let emb = project_on(tape, f_out, &p.smd).stage("project")?;
    let up = tape.resize(emb, image.0, image.1).stage("upsample")?;
    let scores = similarity_on(tape, up, bank).stage("similarity")?;
    Ok(tape.scale_const(scores, logit_scale))
}

/// Nodes of one sample's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Weighted alignment term.
    pub align: Option<Var>,
    /// Weighted segmentation term.
    pub seg: Option<Var>,
    pub total: Var,
    pub f_top: Var,
    pub f_mid: Option<Var>,
    pub logits: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// A recorded objective with every parameter as a trainable leaf.
pub struct LossGraph {
    pub tape: Tape,
    /// Parameter leaves in store order.
    pub params: Vec<(String, Var)>,
    pub nodes: LossNodes,
}

impl LossGraph {
    /// Gradient of the unrouted total with respect to every parameter.
    pub fn total_gradients(&self) -> Result<Vec<Tensor>> {
        let g = self.tape.backward(self.nodes.total)?;
        Ok(self
            .params
            .iter()
            .map(|(_, v)| g.get_or_zeros(*v, self.tape.value(*v)))
            .collect())
    }

    /// Separate backward passes for the two terms.
    pub fn backward_terms(&self) -> Result<(Option<Gradients>, Option<Gradients>)> {
        let a = self.nodes.align.map(|v| self.tape.backward(v)).transpose()?;
        let s = self.nodes.seg.map(|v| self.tape.backward(v)).transpose()?;
        Ok((a, s))
    }
}

/// Builds the objective on `tape` with parameters already bound to `p`.
pub fn loss_on(
    tape: &mut Tape,
    sample: &SceneSample,
    p: &ModelParams<Var>,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
    input: DecoderInput,
) -> Result<LossNodes> {
    if !cfg.align && !cfg.seg {
        return Err(Error::Config("both loss terms are disabled".into()));
    }
    let (f_top, f_mid) = encoder_on(tape, sample, p, &cfg.layers)?;
    let mut bd = LossBreakdown::default();
    let align = if cfg.align {
        let fm = f_mid.ok_or_else(|| Error::Config("alignment loss needs the encoder".into()))?;
        let (v, b) = align_loss_on(tape, fm, &sample.teacher).stage("align_loss")?;
        bd.align = b.total;
        Some(tape.scale_const(v, cfg.align_weight))
    } else {
        None
    };
    let (seg, logits) = if cfg.seg {
        let dec_in = match input {
            DecoderInput::Encoded => f_mid,
            DecoderInput::Teacher => Some(tape.constant(sample.teacher.clone())),
        };
        let image = (sample.gt.height, sample.gt.width);
        let logits = decoder_on(tape, f_top, dec_in, p, cfg.no_gate, bank, image, cfg.logit_scale)?;
        let (v, b) = seg_loss_on(tape, logits, &sample.masks).stage("seg_loss")?;
        bd.dice = b.dice;
        bd.bce = b.bce;
        bd.seg = b.total;
        (Some(tape.scale_const(v, cfg.seg_weight)), Some(logits))
    } else {
        (None, None)
    };
    let total = match (align, seg) {
        (Some(a), Some(s)) => tape.add(a, s)?,
        (Some(a), None) => a,
        (None, Some(s)) => s,
        (None, None) => unreachable!("checked above"),
    };
    bd.total = tape.scalar(total);
    Ok(LossNodes {
        align,
        seg,
        total,
        f_top,
        f_mid,
        logits,
        breakdown: bd,
    })
}

/// Builds one sample's objective with every parameter as a trainable leaf.
pub fn loss_graph(
    sample: &SceneSample,
    model: &ModelParams,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
    input: DecoderInput,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let p = model.params(&mut tape)?;
    let params = p.named();
    let nodes = loss_on(&mut tape, sample, &p, bank, cfg, input)?;
    Ok(LossGraph { tape, params, nodes })
}

/// Loss terms of one sample at the given parameters.
pub fn total_loss(
    sample: &SceneSample,
    model: &ModelParams,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.constants(&mut tape)?;
    Ok(loss_on(&mut tape, sample, &p, bank, cfg, DecoderInput::Encoded)?.breakdown)
}

/// Combines per-term gradients by group: core parameters take both terms,
/// backbone parameters only the segmentation term, frozen groups nothing.
pub fn route_gradients(
    align: Option<&Gradients>,
    seg: Option<&Gradients>,
    params: &[(String, Var)],
    store: &ParamStore,
    freeze_backbone: bool,
) -> Result<Vec<Tensor>> {
    if params.len() != store.len() {
        return Err(Error::Integrity(format!(
            "{} parameter leaves but {} store entries",
            params.len(),
            store.len()
        )));
    }
    let mut out = Vec::with_capacity(params.len());
    for (e, (name, var)) in store.entries().iter().zip(params) {
        if &e.name != name {
            return Err(Error::Integrity(format!(
                "parameter order mismatch: store has `{}`, graph has `{name}`",
                e.name
            )));
        }
        let group = e
            .group
            .ok_or_else(|| Error::Config(format!("parameter `{name}` has no update group")))?;
        let mut g = Tensor::zeros(e.value.shape());
        let take_align = group == Group::Core;
        let take_seg = !(group == Group::Backbone && freeze_backbone);
        if let (true, Some(ga)) = (take_align, align) {
            if let Some(t) = ga.get(*var) {
                g.accumulate(t)?;
            }
        }
        if let (true, Some(gs)) = (take_seg, seg) {
            if let Some(t) = gs.get(*var) {
                g.accumulate(t)?;
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Label map for one sample, optionally feeding the teacher to the decoder.
pub fn predict(
    sample: &SceneSample,
    model: &ModelParams,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
    input: DecoderInput,
) -> Result<SegmentationMap> {
    let mut tape = Tape::new();
    let p = model.constants(&mut tape)?;
    let (f_top, f_mid) = encoder_on(&mut tape, sample, &p, &cfg.layers)?;
    let dec_in = match input {
        DecoderInput::Encoded => f_mid,
        DecoderInput::Teacher => {
            if let Some(fm) = f_mid {
                tape.value(fm)
                    .expect_same_shape(&sample.teacher, "substitution")
                    .map_err(|e| Error::Config(format!("teacher cannot replace the encoder output: {e}")))?;
            }
            Some(tape.constant(sample.teacher.clone()))
        }
    };
    let image = (sample.gt.height, sample.gt.width);
    let logits = decoder_on(&mut tape, f_top, dec_in, &p, cfg.no_gate, bank, image, cfg.logit_scale)?;
    argmax_labels(tape.value(logits))
}
