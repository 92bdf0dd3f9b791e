//! Run orchestration: configuration, the step loop, logs, checkpoints,
//! comparisons and plot data.

pub mod compare;
pub mod config;
pub mod plot;
pub mod run;

pub use compare::{compare, ComparisonReport};
pub use config::{HvReference, RunConfig, RunMode};
pub use plot::{emit_plot_data, Figure};
pub use run::{read_records, resume, run, RunSummary, Runner, StepRecord, RECORD_SCHEMA};
