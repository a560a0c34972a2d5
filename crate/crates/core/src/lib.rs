//! Class-agnostic, prior-free multi-class object counting.

pub mod datasets;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod finch;
pub mod imaging;
pub mod maskproc;
pub mod multiscale;
pub mod pipeline;
pub mod prompting;
pub mod protocol;
pub mod synthetic;

pub use error::{Error, Result};
pub use pipeline::{Pipeline, PipelineConfig, Profile};
