//! Batch front-end for the billiard experiment: configuration, the end-to-end
//! pipeline, the spectrum cache and the run manifest.

pub mod cache;
pub mod config;
pub mod pipeline;

pub use config::{load_config, parse_config, validate_config, ConfigError, Overrides, RunConfig};
pub use pipeline::{run_classical, run_experiment, RunError, RunManifest, MANIFEST_FILE};
