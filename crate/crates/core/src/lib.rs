pub mod error;
pub mod fusion;
pub mod manifest;
pub mod nifti;
pub mod postprocess;
pub mod ranker;
pub mod stratify;
pub mod taskspec;
pub mod metrics;
pub mod volume;

pub use error::{Error, Result};
