//! Experiment orchestration: configs, multi-seed runs, sweeps, calibration
//! and the theory report, with their file outputs.

pub mod config;
pub mod metrics;
pub mod output;
pub mod run;
pub mod theory_report;

pub use config::{DetectorSettings, DetectorSpec, ExperimentConfig, Setting, TheorySettings};
pub use metrics::{precision_recall, run_metrics, summarize, ModeSummary, PrecisionRecall, RunMetrics};
pub use run::{calibrate, run_experiment, sweep, CalibrationReport, ExperimentResult, SweepParam, VERSION};
pub use theory_report::{run_theory, TheoryCheck, TheoryReport};
