//! Training, evaluation, the robustness protocol, the shortcut probe and
//! the command-line front end.

mod cli;
mod config;
mod eval;
mod train;

pub use cli::{cli_main, write_metrics, CHECKPOINT_FILE, CURVES_FILE, DATASET_DIR, METRICS_FILE, METRICS_SCHEMA_VERSION};
pub use config::{
    DatasetSource, ExperimentConfig, LoadedDataset, OptimizerConfig, S3Config, S3Mode, SamplerConfig, OUTPUT_DIR_ENV,
};
pub use eval::{
    evaluate, evaluate_arm, evaluate_intervened, gate_splits, predict_all, seen_unseen_protocol, shortcut_probe,
    static_bank, ArmReport, InterventionMode, MetricsReport, ProtocolReport, TypeAccuracy,
};
pub use train::{train, train_on, write_curves_csv, CurvePoint, TrainOutcome, CURVE_HEADER};
