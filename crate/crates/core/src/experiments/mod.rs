//! Run configuration, the training loop, and experiment drivers.

mod config;
mod studies;
mod train;

pub use config::{EvalConfig, OptimConfig, RunConfig, SeedSet, TaskConfig, TrainConfig, OUTPUT_ROOT_ENV};
pub use studies::{
    generate_dataset, load_run, run_connectivity_experiment, run_construction_probe, run_control_eval, run_evaluation,
    run_probe_eval, ConnectivityReport, ProbeOptions, CONNECTIVITY_FILE, PROBE_EPISODES,
};
pub use train::{
    learning_rate, probe_source, run_training, run_training_in, EvalContext, RunManifest, CHECKPOINT_FILE,
    CODE_VERSION, CONFIG_FILE, DIAGNOSTIC_CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE,
};
