//! Synthetic data, configuration, persistence and the end-to-end pipeline.

pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod runlog;
pub mod synthetic;

pub use config::PipelineConfig;
pub use dataset::{split_clips, InteractionClip, Split};
pub use pipeline::{run_pipeline, Phase, Pipeline};
pub use synthetic::{generate_mixed, generate_synthetic, Scenario, SyntheticClip, SyntheticConfig};
