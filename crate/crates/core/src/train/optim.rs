//! AdamW with decoupled weight decay, and the warmup plus cosine schedule.

use std::f64::consts::PI;

use super::model::{Group, ParamStore};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. `lr_for` gives the learning rate of each group.
///
/// The decay `theta -= lr * wd * theta` uses the pre-update value and is kept
/// out of the moment estimates.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    lr_for: impl Fn(Group) -> f64,
    opt: &AdamW,
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            axis: "parameter count",
            expected: store.len(),
            got: grads.len(),
        });
    }
    for (e, g) in store.entries().iter().zip(grads) {
        g.expect_same_shape(&e.value, "adamw_step")?;
        if let Some(loc) = g.first_non_finite() {
            return Err(Error::NonFinite {
                name: format!("gradient of {}", e.name),
                location: Some(loc),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        let group = e
            .group
            .ok_or_else(|| Error::Config(format!("parameter `{}` has no update group", e.name)))?;
        let lr = lr_for(group);
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        let theta = e.value.data_mut();
        for k in 0..theta.len() {
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            theta[k] -= lr * opt.weight_decay * theta[k];
            theta[k] -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Main learning rate at optimizer step `step`: linear warmup from 0, then
/// half-cosine decay to 0 at `epochs * steps_per_epoch`.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    cfg.lr_main * schedule_factor(step, cfg, steps_per_epoch)
}

pub(crate) fn schedule_factor(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let decay = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / decay as f64).min(1.0);
    0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::model::{ParamEntry, Visibility};

    fn scalar_store(theta: f64) -> ParamStore {
        ParamStore::from_entries(vec![ParamEntry {
            name: "smd.gate.gamma".into(),
            value: Tensor::scalar(theta),
            group: Some(Group::Core),
            visibility: Visibility::AlignAndSeg,
        }])
        .unwrap()
    }

    const OPT: AdamW = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &[Tensor::scalar(0.0)], |_| 0.5, &OPT, &mut st).unwrap();
        assert_eq!(s.entries()[0].value[0], 0.7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        let opt = AdamW { weight_decay: 0.1, ..OPT };
        adamw_step(&mut s, &[Tensor::scalar(0.0)], |_| 1.0, &opt, &mut st).unwrap();
        assert!((s.entries()[0].value[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn quadratic_trajectory_matches_the_textbook_update() {
        // f = theta^2, written out longhand.
        let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.1);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        for t in 1..=10 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);

            let g_impl = 2.0 * s.entries()[0].value[0];
            adamw_step(&mut s, &[Tensor::scalar(g_impl)], |_| lr, &OPT, &mut st).unwrap();
            assert!((s.entries()[0].value[0] - th).abs() <= 1e-12, "step {t}");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        match adamw_step(&mut s, &[Tensor::scalar(f64::NAN)], |_| 0.1, &OPT, &mut st) {
            Err(Error::NonFinite { name, .. }) => assert!(name.contains("smd.gate.gamma")),
            e => panic!("{e:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            lr_main: 0.3,
            epochs: 5,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let spe = 4;
        assert_eq!(lr_at(0, &cfg, spe), 0.0);
        assert_eq!(lr_at(4, &cfg, spe), 0.3);
        assert!(lr_at(20, &cfg, spe).abs() < 1e-15);
        assert!((lr_at(12, &cfg, spe) - 0.15).abs() < 1e-15);
        let below = lr_at(3, &cfg, spe);
        assert!((below - 0.225).abs() < 1e-15);
    }
}
