//! File formats, configuration, pipeline runner and synthetic data for
//! [`rerank_core`].
//!
//! * [`formats`]: FEAT, NBRT, SPRW and PCAM binaries, submission and label CSVs.
//! * [`config`]: the JSON pipeline configuration and `key.path=value` overrides.
//! * [`pipeline`]: [`run_pipeline`], artifact digests and the run manifest.
//! * [`synthetic`]: seeded clustered embeddings with labels.
//! * [`gradcheck`]: finite-difference verification of the loss gradients.

pub mod config;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod pipeline;
pub mod synthetic;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use pipeline::{run_pipeline, Logger, RunOutput};
pub use synthetic::{generate_synthetic, SyntheticSpec};
