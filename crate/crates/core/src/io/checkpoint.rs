//! Checkpoint directories: `manifest.json` plus one STNS1 file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stns::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "ovseg-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Resolved run configuration at save time.
    pub config: serde_json::Value,
    /// Parameters in store order.
    pub params: Vec<(String, Tensor)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    config: serde_json::Value,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn payload_file(name: &str) -> String {
    format!("params/{name}.stns")
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(format!("creating {}", pdir.display()), e))?;
    let mut entries = Vec::with_capacity(ckpt.params.len());
    for (name, t) in &ckpt.params {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::Validation(format!("parameter name `{name}` is not file-safe")));
        }
        let file = payload_file(name);
        write_tensor(dir.join(&file), t)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: ckpt.step,
        config: ckpt.config.clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Validation(format!(
            "{} is not a checkpoint manifest (format `{}`)",
            path.display(),
            manifest.format
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: manifest.version,
        });
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let file = dir.join(&e.file);
        if !file.is_file() {
            return Err(Error::Integrity(format!(
                "parameter `{}` listed in the manifest has no payload at {}",
                e.name,
                file.display()
            )));
        }
        let t = read_tensor(&file)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Integrity(format!(
                "parameter `{}` payload has shape {:?}, manifest says {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        params.push((e.name, t));
    }
    Ok(Checkpoint {
        step: manifest.step,
        config: manifest.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn sample() -> Checkpoint {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(0);
        Checkpoint {
            step: 17,
            config: serde_json::json!({"lr": 0.01, "layers": [2, 12]}),
            params: vec![
                ("a.weight".into(), Tensor::randn(&[2, 3, 1, 1], &mut r)),
                ("a.bias".into(), Tensor::randn(&[2], &mut r)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(dir.path(), &c).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.config, c.config);
        for ((n0, t0), (n1, t1)) in c.params.iter().zip(&back.params) {
            assert_eq!(n0, n1);
            assert!(t0.data().iter().zip(t1.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn missing_payload_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        fs::remove_file(dir.path().join("params/a.bias.stns")).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Integrity(m)) => assert!(m.contains("a.bias")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Version { expected: 1, found: 9 })
        ));
    }
}
