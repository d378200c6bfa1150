//! File formats, synthetic data, checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod stns;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{read_pyramid, read_scene, write_scene, Dataset, SceneSample};
pub use stns::{read_tensor, write_tensor};
pub use synth::{gen_scene, gen_text_bank, SyntheticSpec};
