//! Library surface of the experiment driver, kept separate from the binary
//! so integration tests can run the pipeline in-process.

pub mod config;
pub mod pipeline;

pub use config::{load_config, ExperimentConfig, FileConfig, Overrides, Setting};
pub use pipeline::{run_ablate, run_evaluate, run_generate, run_infer, run_train, SplitChoice};
