//! Experiment orchestration: configuration, commands and reports.

mod commands;
mod config;
mod report;

pub use commands::{
    derive_seed, AblationOutcome, CellSummary, Harness, MeterOutcome, Outcome, Suite, TrainOutcome, BUDGET_SLACK,
};
pub use config::{
    AttackSection, Baseline, ChecksSection, DataConfig, EvalSection, ExperimentConfig, ExperimentSection,
    MeterSection, PathsConfig, TransferSection,
};
pub use report::{
    aggregate_rows, histogram, read_rows_csv, write_rows_csv, Aggregate, Check, HistogramBin, ImageRow, Report,
    Summary, SummaryAggregate, HISTOGRAM_BIN_WIDTH, VERSION,
};
