//! Model parameters, backbone adapters, and the tagged parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::LeafFn;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::pyramid::{validate_layer_set, TOP_LAYER};
use crate::sae::SaeParams;
use crate::smd::SmdParams;
use crate::tensor::{Tape, Tensor, Var};

/// How many of the deepest configured layers get a trainable adapter.
pub const ADAPTED_LAYERS: usize = 3;

/// Identity-initialized per-channel affine on one pyramid layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneAdapter<T = Tensor> {
    pub layer: usize,
    pub scale: T,
    pub shift: T,
}

impl BackboneAdapter<Tensor> {
    pub fn identity(layer: usize, channels: usize) -> Self {
        BackboneAdapter {
            layer,
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
        }
    }
}

impl<T> BackboneAdapter<T> {
    pub fn try_map<U>(&self, f: &mut LeafFn<'_, T, U>) -> Result<BackboneAdapter<U>> {
        let prefix = format!("backbone.l{:02}", self.layer);
        Ok(BackboneAdapter {
            layer: self.layer,
            scale: f(format!("{prefix}.scale"), &self.scale)?,
            shift: f(format!("{prefix}.shift"), &self.shift)?,
        })
    }
}

/// Architecture knobs that decide which parameters exist and how they are wired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub teacher_channels: usize,
    pub embed_dim: usize,
    pub layers: Vec<usize>,
    /// Decoder input is the modulation map alone, with no residual gate.
    pub no_gate: bool,
    /// Skip the encoder and the modulation path entirely.
    pub no_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            teacher_channels: 8,
            embed_dim: 12,
            layers: crate::pyramid::DEFAULT_LAYERS.to_vec(),
            no_gate: false,
            no_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        validate_layer_set(&self.layers)?;
        for (name, v) in [
            ("channels", self.channels),
            ("teacher_channels", self.teacher_channels),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.no_gate && self.no_encoder {
            return Err(Error::Config(
                "no_gate and no_encoder together leave the decoder without input".into(),
            ));
        }
        Ok(())
    }

    /// The deepest configured layers, shallowest first.
    pub fn adapter_layers(&self) -> Vec<usize> {
        let n = self.layers.len();
        self.layers[n.saturating_sub(ADAPTED_LAYERS)..].to_vec()
    }

    pub fn fusion_layers(&self) -> Vec<usize> {
        self.layers.iter().copied().filter(|&l| l != TOP_LAYER).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub adapters: Vec<BackboneAdapter<T>>,
    /// Absent when the encoder is ablated.
    pub sae: Option<SaeParams<T>>,
    pub smd: SmdParams<T>,
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let adapters = cfg
            .adapter_layers()
            .into_iter()
            .map(|l| BackboneAdapter::identity(l, cfg.channels))
            .collect();
        let sae = if cfg.no_encoder {
            None
        } else {
            Some(SaeParams::init(cfg.channels, cfg.teacher_channels, &cfg.fusion_layers(), rng)?)
        };
        let smd = SmdParams::init(cfg.channels, cfg.teacher_channels, cfg.embed_dim, rng);
        Ok(ModelParams { adapters, sae, smd })
    }

    /// Binds every leaf as a trainable tape node.
    pub fn params(&self, tape: &mut Tape) -> Result<ModelParams<Var>> {
        self.try_map(&mut |_, t| Ok(tape.param(t.clone())))
    }

    pub fn constants(&self, tape: &mut Tape) -> Result<ModelParams<Var>> {
        self.try_map(&mut |_, t| Ok(tape.constant(t.clone())))
    }
}

impl<T> ModelParams<T> {
    /// Visits leaves in a fixed order under their dotted names.
    pub fn try_map<U>(&self, f: &mut LeafFn<'_, T, U>) -> Result<ModelParams<U>> {
        let adapters = self
            .adapters
            .iter()
            .map(|a| a.try_map(f))
            .collect::<Result<Vec<_>>>()?;
        let sae = match &self.sae {
            Some(s) => Some(s.try_map(f)?),
            None => None,
        };
        Ok(ModelParams {
            adapters,
            sae,
            smd: self.smd.try_map(f)?,
        })
    }
}

impl<T: Clone> ModelParams<T> {
    /// `(name, leaf)` pairs in visiting order.
    pub fn named(&self) -> Vec<(String, T)> {
        let mut out = Vec::new();
        self.try_map(&mut |name, t| {
            out.push((name, t.clone()));
            Ok(())
        })
        .expect("collecting leaves cannot fail");
        out
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Encoder, decoder, projector.
    Core,
    /// Adapter stand-ins for the last backbone layers.
    Backbone,
}

/// Which loss terms may update a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    AlignAndSeg,
    SegOnly,
}

impl Group {
    pub fn visibility(self) -> Visibility {
        match self {
            Group::Core => Visibility::AlignAndSeg,
            Group::Backbone => Visibility::SegOnly,
        }
    }

    /// Tag derived from the parameter's dotted name.
    pub fn of_name(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        match head {
            "sae" | "smd" => Some(Group::Core),
            "backbone" => Some(Group::Backbone),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: Option<Group>,
    pub visibility: Visibility,
}

/// Flat, ordered, tagged view of every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn from_model(model: &ModelParams) -> Result<Self> {
        let entries = model
            .named()
            .into_iter()
            .map(|(name, t)| {
                let group = Group::of_name(&name);
                ParamEntry {
                    visibility: group.map_or(Visibility::SegOnly, Group::visibility),
                    name,
                    value: t,
                    group,
                }
            })
            .collect();
        let store = ParamStore { entries };
        store.validate()?;
        Ok(store)
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let store = ParamStore { entries };
        store.validate()?;
        Ok(store)
    }

    /// Every entry tagged, tags consistent, names unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            let g = e
                .group
                .ok_or_else(|| Error::Config(format!("parameter `{}` has no update group", e.name)))?;
            if g.visibility() != e.visibility {
                return Err(Error::Config(format!(
                    "parameter `{}` in group {g:?} cannot have visibility {:?}",
                    e.name, e.visibility
                )));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate parameter `{}`", e.name)));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Rebuilds the structured parameters using `template` for layout.
    pub fn to_model(&self, template: &ModelParams) -> Result<ModelParams> {
        let mut it = self.entries.iter();
        template.try_map(&mut |name, t| {
            let e = it
                .next()
                .ok_or_else(|| Error::Integrity(format!("parameter store has no entry for `{name}`")))?;
            if e.name != name {
                return Err(Error::Integrity(format!(
                    "parameter store order mismatch: expected `{name}`, found `{}`",
                    e.name
                )));
            }
            if e.value.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name,
                    expected: t.shape().to_vec(),
                    found: e.value.shape().to_vec(),
                });
            }
            Ok(e.value.clone())
        })
    }

    pub fn to_pairs(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Loads checkpoint values into a model laid out like `template`.
    pub fn from_checkpoint(ckpt: &Checkpoint, template: &ModelParams) -> Result<Self> {
        let mut store = ParamStore::from_model(template)?;
        let expected: Vec<&str> = store.entries.iter().map(|e| e.name.as_str()).collect();
        for (name, _) in &ckpt.params {
            if !expected.contains(&name.as_str()) {
                return Err(Error::Integrity(format!(
                    "checkpoint parameter `{name}` does not exist in this model"
                )));
            }
        }
        for e in &mut store.entries {
            let (_, t) = ckpt
                .params
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint is missing parameter `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::ParamShape {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            e.value = t.clone();
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn model(cfg: &ModelConfig) -> ModelParams {
        ModelParams::init(cfg, &mut Xoshiro256PlusPlus::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn adapters_cover_the_three_deepest_layers() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.adapter_layers(), vec![8, 10, 12]);
        cfg.layers = vec![3, 6, 9, 12];
        assert_eq!(cfg.adapter_layers(), vec![6, 9, 12]);
        let m = model(&cfg);
        assert!(m.adapters.iter().all(|a| a.scale.data().iter().all(|&s| s == 1.0)));
        assert!(m.adapters.iter().all(|a| a.shift.max_abs() == 0.0));
    }

    #[test]
    fn store_tags_follow_the_name() {
        let store = ParamStore::from_model(&model(&ModelConfig::default())).unwrap();
        for e in store.entries() {
            let expect = if e.name.starts_with("backbone.") {
                (Group::Backbone, Visibility::SegOnly)
            } else {
                (Group::Core, Visibility::AlignAndSeg)
            };
            assert_eq!((e.group.unwrap(), e.visibility), expect, "{}", e.name);
        }
        assert!(store.get("smd.proj.weight").is_some());
        assert!(store.get("sae.fuse.l02.alpha").is_some());
    }

    #[test]
    fn untagged_entry_is_a_config_error() {
        let mut entries = ParamStore::from_model(&model(&ModelConfig::default()))
            .unwrap()
            .entries()
            .to_vec();
        entries[0].group = None;
        assert!(matches!(ParamStore::from_entries(entries), Err(Error::Config(_))));
    }

    #[test]
    fn store_round_trips_through_the_model() {
        let m = model(&ModelConfig::default());
        let store = ParamStore::from_model(&m).unwrap();
        assert_eq!(store.to_model(&m).unwrap(), m);
    }

    #[test]
    fn checkpoint_shape_mismatch_names_the_parameter() {
        let m = model(&ModelConfig::default());
        let store = ParamStore::from_model(&m).unwrap();
        let ckpt = Checkpoint {
            step: 0,
            config: serde_json::Value::Null,
            params: store.to_pairs(),
        };
        let other = model(&ModelConfig {
            embed_dim: 5,
            ..ModelConfig::default()
        });
        match ParamStore::from_checkpoint(&ckpt, &other) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "smd.proj.weight"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn no_encoder_has_no_sae_params() {
        let m = model(&ModelConfig {
            no_encoder: true,
            ..ModelConfig::default()
        });
        let store = ParamStore::from_model(&m).unwrap();
        assert!(store.entries().iter().all(|e| !e.name.starts_with("sae.")));
    }
}
