//! The training loop, evaluation, and decoder-input substitution.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::forward::{loss_graph, predict, route_gradients, DecoderInput, LossBreakdown};
use super::model::{Group, ModelConfig, ModelParams, ParamStore};
use super::optim::{adamw_step, schedule_factor, AdamState};
use super::TrainConfig;
use crate::analysis::spectrum::{map_ratio, DEFAULT_CUTOFF};
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, Checkpoint, Dataset, SceneSample};
use crate::seghead::{ConfusionMatrix, MiouReport, TextEmbeddingBank, IGNORE_LABEL};
use crate::tensor::{Tape, Tensor};

/// Samples used for the per-epoch spectral diagnostic.
const RATIO_SAMPLES: usize = 8;
/// Mixed into the seed for the shuffling stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

/// One optimizer step. `eval_miou` is set on the last step of each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub align: f64,
    pub dice: f64,
    pub bce: f64,
    pub total: f64,
    pub eval_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub align: f64,
    pub dice: f64,
    pub bce: f64,
    pub total: f64,
    pub eval_miou: Option<f64>,
    /// Mean of `Ratio(encoder output) - Ratio(top layer)`.
    pub ratio_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub model: ModelParams,
    pub store: ParamStore,
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

/// Snapshot stored in a checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// Channel, teacher and embedding widths of a dataset.
pub fn data_dims(sample: &SceneSample, bank: &TextEmbeddingBank) -> Result<(usize, usize, usize)> {
    let (c, _, _) = sample.pyramid.dims()?;
    let (ct, _, _) = sample.teacher.chw("teacher")?;
    Ok((c, ct, bank.dim()))
}

/// Seeded initial parameters.
pub fn init_model(cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<ModelParams> {
    ModelParams::init(model_cfg, &mut Xoshiro256PlusPlus::seed_from_u64(cfg.seed))
}

fn sample_gradients(
    sample: &SceneSample,
    model: &ModelParams,
    store: &ParamStore,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let g = loss_graph(sample, model, bank, cfg, DecoderInput::Encoded)?;
    let (ga, gs) = g.backward_terms()?;
    let grads = route_gradients(ga.as_ref(), gs.as_ref(), &g.params, store, cfg.freeze_backbone)?;
    Ok((grads, g.nodes.breakdown))
}

/// Routed gradients and loss terms averaged over `batch`. Per-sample work may
/// run on several threads; the reduction is always in batch order.
pub fn batch_gradients(
    batch: &[&SceneSample],
    model: &ModelParams,
    store: &ParamStore,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let threads = cfg.threads.clamp(1, batch.len());
    let per_sample: Vec<Result<(Vec<Tensor>, LossBreakdown)>> = if threads == 1 {
        batch.iter().map(|s| sample_gradients(s, model, store, bank, cfg)).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| sample_gradients(s, model, store, bank, cfg))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut sum: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
    let mut bd = LossBreakdown::default();
    for r in per_sample {
        let (g, b) = r?;
        for (acc, gi) in sum.iter_mut().zip(&g) {
            acc.accumulate(gi)?;
        }
        bd.accumulate(&b);
    }
    let inv = 1.0 / batch.len() as f64;
    Ok((sum.into_iter().map(|g| g.scale(inv)).collect(), bd.scaled(inv)))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
}

/// mIoU over `samples` at image resolution.
pub fn eval_miou(
    samples: &[SceneSample],
    model: &ModelParams,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
    input: DecoderInput,
) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(bank.len(), IGNORE_LABEL);
    for s in samples {
        let pred = predict(s, model, bank, cfg, input)?;
        cm.add(&pred, &s.gt)?;
    }
    Ok(cm.report())
}

fn ratio_change(samples: &[SceneSample], model: &ModelParams, cfg: &TrainConfig) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in samples.iter().take(RATIO_SAMPLES) {
        let mut tape = Tape::new();
        let p = model.constants(&mut tape).ok()?;
        let (top, mid) = super::forward::encoder_on(&mut tape, s, &p, &cfg.layers).ok()?;
        let mid = mid?;
        let r_mid = map_ratio(tape.value(mid), DEFAULT_CUTOFF).ok()?;
        let r_top = map_ratio(tape.value(top), DEFAULT_CUTOFF).ok()?;
        acc += r_mid - r_top;
        n += 1;
    }
    (n > 0).then(|| acc / n as f64)
}

fn checkpoint_of(cfg: &TrainConfig, model_cfg: &ModelConfig, store: &ParamStore, step: usize) -> Result<Checkpoint> {
    let snapshot = CheckpointConfig {
        train: cfg.clone(),
        model: model_cfg.clone(),
    };
    Ok(Checkpoint {
        step: step as u64,
        config: serde_json::to_value(snapshot)?,
        params: store.to_pairs(),
    })
}

/// Rebuilds configuration and parameters from a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(TrainConfig, ModelConfig, ModelParams)> {
    let snap: CheckpointConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Integrity(format!("checkpoint configuration is unreadable: {e}")))?;
    let template = init_model(&snap.train, &snap.model)?;
    let store = ParamStore::from_checkpoint(ckpt, &template)?;
    let model = store.to_model(&template)?;
    Ok((snap.train, snap.model, model))
}

/// Trains on `dataset.train`, evaluating on `dataset.eval` after every epoch.
///
/// On a non-finite loss, gradient or intermediate value, the last good
/// parameters are written under `recovery_dir` (when given) and a divergence
/// error is returned.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, recovery_dir: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    let first = dataset
        .train
        .first()
        .ok_or_else(|| Error::Validation("dataset has no training scenes".into()))?;
    let (c, ct, d) = data_dims(first, &dataset.bank)?;
    let model_cfg = cfg.model_config(c, ct, d);
    let template = init_model(cfg, &model_cfg)?;
    let mut store = ParamStore::from_model(&template)?;
    let mut model = template.clone();
    let mut state = AdamState::new(&store);
    let opt = cfg.optimizer();

    let n = dataset.train.len();
    let spe = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_bd = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneSample> = idx.iter().map(|&i| &dataset.train[i]).collect();
            let outcome = batch_gradients(&batch, &model, &store, &dataset.bank, cfg);
            let diverged = match &outcome {
                Ok((g, bd)) => !bd.is_finite() || g.iter().any(|t| t.first_non_finite().is_some()),
                Err(e) => e.is_non_finite(),
            };
            if diverged {
                let checkpoint = match recovery_dir {
                    Some(dir) => {
                        let path = dir.join("last_good_checkpoint");
                        save_checkpoint(&path, &checkpoint_of(cfg, &model_cfg, &store, step)?)?;
                        path
                    }
                    None => PathBuf::from("<not saved>"),
                };
                return Err(Error::Divergence {
                    epoch,
                    step,
                    checkpoint,
                });
            }
            let (mut grads, bd) = outcome?;
            if let Some(c) = cfg.clip_grad_norm {
                clip(&mut grads, c);
            }
            let factor = schedule_factor(step, cfg, spe);
            let lr_main = cfg.lr_main * factor;
            let lr_backbone = cfg.lr_backbone * factor;
            adamw_step(
                &mut store,
                &grads,
                |g| match g {
                    Group::Core => lr_main,
                    Group::Backbone if cfg.freeze_backbone => 0.0,
                    Group::Backbone => lr_backbone,
                },
                &opt,
                &mut state,
            )?;
            model = store.to_model(&template)?;
            epoch_bd.accumulate(&bd);
            report.steps.push(StepRecord {
                step,
                lr: lr_main,
                align: bd.align,
                dice: bd.dice,
                bce: bd.bce,
                total: bd.total,
                eval_miou: None,
            });
            step += 1;
        }
        let eval_miou = if dataset.eval.is_empty() {
            None
        } else {
            Some(eval_miou(&dataset.eval, &model, &dataset.bank, cfg, DecoderInput::Encoded)?.miou)
        };
        if let Some(last) = report.steps.last_mut() {
            last.eval_miou = eval_miou;
        }
        let probe = if dataset.eval.is_empty() { &dataset.train } else { &dataset.eval };
        let mean = epoch_bd.scaled(1.0 / spe as f64);
        report.epochs.push(EpochRecord {
            epoch,
            align: mean.align,
            dice: mean.dice,
            bce: mean.bce,
            total: mean.total,
            eval_miou,
            ratio_change: ratio_change(probe, &model, cfg),
        });
    }
    let checkpoint = checkpoint_of(cfg, &model_cfg, &store, step)?;
    Ok(Trained {
        config: cfg.clone(),
        model_config: model_cfg,
        model,
        store,
        report,
        checkpoint,
    })
}

/// Eval mIoU with the encoder output and with the teacher as decoder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub miou_encoded: f64,
    pub miou_teacher: f64,
    pub delta: f64,
}

pub fn substitution_test(
    samples: &[SceneSample],
    model: &ModelParams,
    bank: &TextEmbeddingBank,
    cfg: &TrainConfig,
) -> Result<Substitution> {
    if model.sae.is_none() {
        return Err(Error::Config("substitution needs a model with an encoder".into()));
    }
    let a = eval_miou(samples, model, bank, cfg, DecoderInput::Encoded)?.miou;
    let b = eval_miou(samples, model, bank, cfg, DecoderInput::Teacher)?.miou;
    Ok(Substitution {
        miou_encoded: a,
        miou_teacher: b,
        delta: (a - b).abs(),
    })
}
