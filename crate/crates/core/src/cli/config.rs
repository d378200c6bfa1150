//! Resolved run configuration: defaults, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::spectrum::DEFAULT_CUTOFF;
use crate::error::{Error, Result};
use crate::io::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Training scenes.
    pub scenes: usize,
    pub eval_scenes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenes: 64,
            eval_scenes: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub substitution: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Eval,
            substitution: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub split: Split,
    /// Cutoff radius for the high/low energy ratio. The default of 0.25 is a
    /// convention, not a derived value.
    pub r_c: f64,
    /// Radial bins; `min(H, W) / 2` when unset.
    pub bins: Option<usize>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            split: Split::Train,
            r_c: DEFAULT_CUTOFF,
            bins: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<String>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
    pub features: Option<String>,
}

/// Everything a subcommand reads, fully resolved before it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub synthetic: SyntheticSpec,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
    pub paths: Paths,
    /// Hash of every setting except `paths` and this field.
    pub fingerprint: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            synthetic: SyntheticSpec::default(),
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analyze: AnalyzeConfig::default(),
            paths: Paths::default(),
            fingerprint: String::new(),
        }
    }
}

/// Recursively overlays `over` onto `base`; non-object values replace.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` inside nested objects, creating them as needed.
pub fn set(v: &mut Value, path: &[&str], value: Value) {
    let mut cur = v;
    for key in &path[..path.len() - 1] {
        if !cur.get(*key).is_some_and(Value::is_object) {
            cur[*key] = Value::Object(Default::default());
        }
        cur = cur.get_mut(*key).expect("just inserted");
    }
    cur[path[path.len() - 1]] = value;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RunConfig {
    /// Defaults overlaid with `file` (if any) and then `flags`.
    pub fn resolve(command: &str, file: Option<&Path>, flags: Value) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !parsed.is_object() {
                return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
            }
            merge(&mut v, parsed);
        }
        merge(&mut v, flags);
        set(&mut v, &["command"], Value::String(command.into()));
        let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.fingerprint = cfg.compute_fingerprint()?;
        Ok(cfg)
    }

    pub fn compute_fingerprint(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("paths");
            m.remove("fingerprint");
        }
        Ok(format!("{:016x}", fnv1a(serde_json::to_string(&v)?.as_bytes())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        fs::write(&f, r#"{"train": {"epochs": 7, "batch_size": 4}, "synthetic": {"noise": 0.5}}"#).unwrap();
        let flags = json!({"train": {"epochs": 3}});
        let c = RunConfig::resolve("train", Some(&f), flags).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.synthetic.noise, 0.5);
        assert_eq!(c.train.lr_main, TrainConfig::default().lr_main);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        fs::write(&f, r#"{"train": {"epoch": 7}}"#).unwrap();
        assert!(matches!(RunConfig::resolve("train", Some(&f), json!({})), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_ignores_paths_but_not_ablations() {
        let a = RunConfig::resolve("train", None, json!({"paths": {"out": "a"}})).unwrap();
        let b = RunConfig::resolve("train", None, json!({"paths": {"out": "b"}})).unwrap();
        let c = RunConfig::resolve("train", None, json!({"train": {"no_gate": true}})).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_ne!(a.fingerprint, c.fingerprint);
    }
}
