//! Training: two-loss objective with gradient routing, AdamW, warmup plus
//! cosine schedule, ablation switches, evaluation and decoder-input
//! substitution.

mod forward;
mod model;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::DEFAULT_LAYERS;

pub use forward::{
    decoder_on, encoder_on, loss_graph, loss_on, predict, route_gradients, total_loss, DecoderInput, LossBreakdown,
    LossGraph, LossNodes, LOGIT_SCALE,
};
pub use model::{
    BackboneAdapter, Group, ModelConfig, ModelParams, ParamEntry, ParamStore, Visibility, ADAPTED_LAYERS,
};
pub use optim::{adamw_step, lr_at, AdamState, AdamW};
pub use run::{
    batch_gradients, eval_miou, init_model, substitution_test, train, EpochRecord, StepRecord, Substitution,
    TrainReport, Trained, CheckpointConfig, data_dims, restore,
};

/// Learning rate of the full-scale setup for encoder, decoder and projector.
pub const FULL_SCALE_LR_MAIN: f64 = 1e-4;
/// Learning rate of the full-scale setup for the fine-tuned backbone layers.
pub const FULL_SCALE_LR_BACKBONE: f64 = 1e-5;
pub const FULL_SCALE_BATCH_SIZE: usize = 64;

/// Optimization and ablation settings.
///
/// The defaults are the desk-scale setup: batch 8 instead of 64, and learning
/// rates raised from `1e-4`/`1e-5` (see [`TrainConfig::full_scale`]) so that 200
/// steps are enough to converge. The 10:1 core-to-backbone ratio is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Include the alignment term.
    pub align: bool,
    /// Include the segmentation term.
    pub seg: bool,
    pub align_weight: f64,
    pub seg_weight: f64,
    /// Temperature applied to cosine scores before the sigmoid.
    pub logit_scale: f64,
    pub freeze_backbone: bool,
    pub no_gate: bool,
    pub no_encoder: bool,
    pub layers: Vec<usize>,
    /// Global gradient-norm clip; off unless training diverges.
    pub clip_grad_norm: Option<f64>,
    /// Worker threads for per-sample gradients. Results do not depend on it.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr_main: 2e-2,
            lr_backbone: 2e-3,
            weight_decay: 1e-4,
            epochs: 25,
            warmup_epochs: 1,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            align: true,
            seg: true,
            align_weight: 1.0,
            seg_weight: 1.0,
            logit_scale: LOGIT_SCALE,
            freeze_backbone: false,
            no_gate: false,
            no_encoder: false,
            layers: DEFAULT_LAYERS.to_vec(),
            clip_grad_norm: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters as reported for the full-scale setup.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr_main: FULL_SCALE_LR_MAIN,
            lr_backbone: FULL_SCALE_LR_BACKBONE,
            batch_size: FULL_SCALE_BATCH_SIZE,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("lr_main", self.lr_main)?;
        positive("lr_backbone", self.lr_backbone)?;
        positive("logit_scale", self.logit_scale)?;
        positive("adam_eps", self.adam_eps)?;
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("align_weight", self.align_weight),
            ("seg_weight", self.seg_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let Some(c) = self.clip_grad_norm {
            positive("clip_grad_norm", c)?;
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Validation(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !self.align && !self.seg {
            return Err(Error::Config("both loss terms are disabled".into()));
        }
        if self.no_encoder && self.align {
            return Err(Error::Config(
                "the alignment loss needs the encoder; disable align with no_encoder".into(),
            ));
        }
        crate::pyramid::validate_layer_set(&self.layers)
    }

    /// Model layout for data with the given widths.
    pub fn model_config(&self, channels: usize, teacher_channels: usize, embed_dim: usize) -> ModelConfig {
        ModelConfig {
            channels,
            teacher_channels,
            embed_dim,
            layers: self.layers.clone(),
            no_gate: self.no_gate,
            no_encoder: self.no_encoder,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}
