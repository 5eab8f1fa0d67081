//! Experiment orchestration: configuration, optimizer, training loop,
//! evaluation and reports.

mod config;
mod eval;
mod experiments;
mod optim;
mod report;
mod train;

pub use config::{
    apply_overrides, parse_flat, to_flat, EvalConfig, ExperimentConfig, FewShotConfig, LossFlags,
    OptimConfig, Precision, SplitConfig, TrainConfig,
};
pub use eval::{evaluate, EntryReport, EvalSettings, MeanRow, MetricsReport, ScoreRecord};
pub use experiments::{
    ablation_csv, eval_settings, evaluate_checkpoint, prepare, run_ablation, run_experiment,
    run_fewshot, train_entry, AblationRow, FewShotRow, ABLATION_ROWS,
};
pub use optim::{OptimState, StableAdamW, StepOutcome};
pub use report::{
    emit_report, read_report, records_csv, report_json, Histogram, ReportFormat, ALL_FORMATS,
    HISTOGRAM_BINS,
};
pub use train::{
    append_loss_log, build_model, load_checkpoint, sample_objective, save_checkpoint, LossRecord,
    LossStats, TeacherCache, TrainOutcome, TrainState, Trainer,
};

#[cfg(test)]
mod tests;
