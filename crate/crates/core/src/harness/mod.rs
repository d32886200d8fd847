//! Experiment configuration, canonical suites and results persistence.

pub mod config;
pub mod ini;
pub mod results;
pub mod suites;

use rand::RngCore;

pub use config::ExperimentConfig;
pub use results::{RunManifest, ResultsWriter};

/// Independent 64-bit seed for job `index` of kind `label` under `seed`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    coop_numerics::rng::indexed_stream(seed, label, index).next_u64()
}
