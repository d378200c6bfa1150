pub mod analysis;
pub mod block;
pub mod cli;
pub mod error;
pub mod io;
pub mod pyramid;
pub mod sae;
pub mod seghead;
pub mod smd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use pyramid::FeaturePyramid;
pub use tensor::Tensor;
