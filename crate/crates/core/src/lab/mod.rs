//! Experiment surface: configuration, synthetic data, and the runners that
//! tie schedules, nets, tapes, and attacks into reproducible artifacts.

pub mod config;
pub mod dataset;
pub mod runners;
pub mod stats;

pub use config::{ExperimentConfig, Precision};
pub use dataset::{synth_dataset, synth_dataset_with_amp, ToyDataset};
pub use runners::{
    addt_finetune_t, analyze_t, eval_t, loss_increase_comparison_t, run_addt, run_analyze,
    run_eval, run_synth, run_train_classifier, run_train_diffusion, train_classifier_t,
    train_diffusion_t, AnalysisArtifacts, EvalRow, EvalTable,
};
