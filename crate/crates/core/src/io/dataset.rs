//! Scene samples and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/text_bank.stns
//! <root>/{train,eval}/scene_NNNN/pyramid_LL.stns   one per layer
//!                               teacher.stns
//!                               masks.stns
//!                               gt.segmap
//!                               names.json
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stns::{read_tensor, write_tensor};
use super::synth::{gen_scene_in, gen_text_bank, SyntheticSpec, World};
use crate::error::{Error, Result};
use crate::pyramid::FeaturePyramid;
use crate::seghead::{SegmentationMap, TextEmbeddingBank};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "ovseg-dataset";

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub pyramid: FeaturePyramid,
    /// `[C_t, 2H, 2W]`.
    pub teacher: Tensor,
    /// `[M, H_img, W_img]` binary.
    pub masks: Tensor,
    pub gt: SegmentationMap,
    pub names: Vec<String>,
}

impl SceneSample {
    /// Cross-field consistency: pyramid/teacher grids, mask/gt agreement.
    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.pyramid.dims()?;
        let (_, th, tw) = self.teacher.chw("SceneSample teacher")?;
        if (th, tw) != (2 * h, 2 * w) {
            return Err(Error::Validation(format!(
                "teacher grid {th}x{tw} is not twice the patch grid {h}x{w}"
            )));
        }
        let (m, ih, iw) = self.masks.chw("SceneSample masks")?;
        if m != self.names.len() {
            return Err(Error::Validation(format!(
                "{m} mask channels but {} category names",
                self.names.len()
            )));
        }
        if (ih, iw) != (self.gt.height, self.gt.width) {
            return Err(Error::Validation(format!(
                "masks are {ih}x{iw} but gt is {}x{}",
                self.gt.height, self.gt.width
            )));
        }
        crate::smd::check_binary(&self.masks)?;
        self.gt.check_labels(m)?;
        Ok(())
    }
}

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = format!("{what} {}", path.display());
    move |e| Error::io(ctx, e)
}

pub fn write_scene(dir: impl AsRef<Path>, s: &SceneSample) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir, "creating"))?;
    for (l, t) in s.pyramid.iter() {
        write_tensor(dir.join(format!("pyramid_{l:02}.stns")), t)?;
    }
    write_tensor(dir.join("teacher.stns"), &s.teacher)?;
    write_tensor(dir.join("masks.stns"), &s.masks)?;
    let gt = dir.join("gt.segmap");
    fs::write(&gt, s.gt.to_text()).map_err(io_err(&gt, "writing"))?;
    let names = dir.join("names.json");
    fs::write(&names, serde_json::to_string(&s.names)? + "\n").map_err(io_err(&names, "writing"))
}

/// Every `pyramid_LL.stns` in `dir`, keyed by `LL`.
pub fn read_pyramid(dir: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let dir = dir.as_ref();
    let mut layers = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir, "listing"))? {
        let entry = entry.map_err(io_err(dir, "listing"))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(l) = name
            .strip_prefix("pyramid_")
            .and_then(|r| r.strip_suffix(".stns"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            layers.push(l);
        }
    }
    layers.sort_unstable();
    if layers.is_empty() {
        return Err(Error::Validation(format!("{} has no pyramid_LL.stns files", dir.display())));
    }
    let mut pyramid = FeaturePyramid::new();
    for l in layers {
        pyramid.insert(l, read_tensor(dir.join(format!("pyramid_{l:02}.stns")))?)?;
    }
    Ok(pyramid)
}

pub fn read_scene(dir: impl AsRef<Path>) -> Result<SceneSample> {
    let dir = dir.as_ref();
    let pyramid = read_pyramid(dir)?;
    let gt_path = dir.join("gt.segmap");
    let gt = SegmentationMap::from_text(&fs::read_to_string(&gt_path).map_err(io_err(&gt_path, "reading"))?)?;
    let names_path = dir.join("names.json");
    let names: Vec<String> =
        serde_json::from_str(&fs::read_to_string(&names_path).map_err(io_err(&names_path, "reading"))?)?;
    let s = SceneSample {
        pyramid,
        teacher: read_tensor(dir.join("teacher.stns"))?,
        masks: read_tensor(dir.join("masks.stns"))?,
        gt,
        names,
    };
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: Option<SyntheticSpec>,
    pub train: usize,
    pub eval: usize,
    pub categories: Vec<String>,
}

/// An in-memory dataset: text bank plus train and eval splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: Option<SyntheticSpec>,
    pub bank: TextEmbeddingBank,
    pub train: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
}

impl Dataset {
    /// Train scenes take indices `0..n_train`, eval scenes the next `n_eval`.
    pub fn generate(spec: &SyntheticSpec, n_train: usize, n_eval: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::Validation("dataset needs at least one training scene".into()));
        }
        spec.validate()?;
        let world = World::new(spec);
        let scenes = |r: std::ops::Range<usize>| -> Result<Vec<SceneSample>> {
            r.map(|i| gen_scene_in(spec, &world, i as u64)).collect()
        };
        Ok(Dataset {
            spec: Some(spec.clone()),
            bank: gen_text_bank(spec)?,
            train: scenes(0..n_train)?,
            eval: scenes(n_train..n_train + n_eval)?,
        })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format: FORMAT.into(),
            version: DATASET_VERSION,
            spec: self.spec.clone(),
            train: self.train.len(),
            eval: self.eval.len(),
            categories: self.bank.names().to_vec(),
        }
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(io_err(root, "creating"))?;
        let mpath = root.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest())? + "\n";
        fs::write(&mpath, text).map_err(io_err(&mpath, "writing"))?;
        write_tensor(root.join("text_bank.stns"), self.bank.embeddings())?;
        for (split, scenes) in [("train", &self.train), ("eval", &self.eval)] {
            for (i, s) in scenes.iter().enumerate() {
                write_scene(root.join(split).join(format!("scene_{i:04}")), s)?;
            }
        }
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mpath = root.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath, "reading"))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Validation(format!("{} is not a dataset manifest", mpath.display())));
        }
        if m.version != DATASET_VERSION {
            return Err(Error::Version {
                expected: DATASET_VERSION,
                found: m.version,
            });
        }
        let bank = TextEmbeddingBank::new(m.categories.clone(), read_tensor(root.join("text_bank.stns"))?)?;
        let split = |name: &str, n: usize| -> Result<Vec<SceneSample>> {
            (0..n)
                .map(|i| {
                    let s = read_scene(root.join(name).join(format!("scene_{i:04}")))?;
                    if s.names != m.categories {
                        return Err(Error::Validation(format!(
                            "{name} scene {i} category names differ from the manifest"
                        )));
                    }
                    Ok(s)
                })
                .collect()
        };
        Ok(Dataset {
            spec: m.spec.clone(),
            bank,
            train: split("train", m.train)?,
            eval: split("eval", m.eval)?,
        })
    }
}
