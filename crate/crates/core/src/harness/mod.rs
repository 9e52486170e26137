//! Single runs, learning-rate sweeps, calibration and reporting.

mod config;
mod report;
mod run;
mod sweep;

pub use config::{RunConfig, RunOptions, SweepPlan};
pub use report::{
    norm_growth, report, NormGrowth, Report, GROWTH_LAYERS, NORM_GROWTH_CSV, NO_RUNS,
    REPORT_RUNS_CSV, REPORT_TXT, SATURATION_CSV,
};
pub use run::{
    evaluate, read_losses, read_verdict, run_single, LossRow, RunOutcome, StepResult, Trainer,
    VerdictRow, CONFIG_FILE, LOSS_FILE, TELEMETRY_FILE, VERDICT_FILE,
};
pub use sweep::{
    calibrate, run_dirs, run_sweep, Calibration, Cell, ConvergenceMatrix, OrderingReport,
    MATRIX_CSV, MATRIX_TXT, PLAN_FILE, VERDICTS_CSV,
};
