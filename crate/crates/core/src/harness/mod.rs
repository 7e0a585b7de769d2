//! Experiment harness: configs, synthetic tasks, pipelines, sweeps, reports.

mod config;
mod pipeline;
mod presets;
pub mod task;

pub use config::{
    DataConfig, ExperimentConfig, FlopsConfig, ModelSettings, Overrides, RetrievalConfig, SweepAxis, SweepConfig,
    Variant, DEFAULT_SEEDS,
};
pub use pipeline::{
    evaluate_saved, flops_report, log_jsonl, mean_std, prepare_samples, run_pipeline, run_seed, run_seed_on, run_sweep,
    seed_dir, store_path, write_stores, write_tasks, EvalRecord, FlopsCurveRow, PipelineResults, PreparedSplits,
    SeedOutcome, SeedRun, Stage, SweepCell, SweepTable, VariantResult,
};
pub use presets::{preset, PRESET_NAMES};
pub use task::{bayes_accuracy, generate_task, SyntheticTask, TaskLayout, TaskStats};
