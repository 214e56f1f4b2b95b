//! Temporal canopy-height estimation from monthly optical stacks, radar
//! composites and sparse LiDAR heights.

pub mod error;
pub mod evaluation;
pub mod geodata;
pub mod inference;
pub mod neuralnet;
pub mod preprocess;
pub mod synthscene;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};
pub use geodata::{Label, RasterPatch, SampleArchive};
pub use neuralnet::{Checkpoint, Tensor, UNetSpec};
pub use preprocess::InputVariant;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
