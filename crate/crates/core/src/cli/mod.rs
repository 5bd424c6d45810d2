//! Experiment runner: JSON configs in, JSON and CSV reports out.

mod config;
mod report;
mod run;

pub use config::{
    load_config, parse_config, ArchSpec, AuditSpec, Design, EstimatorSpec, Experiment, ExperimentConfig,
    GeneralizationSpec, NormKind, OracleSpec, SweepSpec, TeacherSpec, TrainSpec, TuningParameter,
    VariantName, DEFAULTS_HELP,
};
pub use report::{write_report, Cell, ExperimentReport, Table};
pub use run::{run_experiment, TOOL_VERSION};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SPARSE_ORACLE_SEED";

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const USAGE: u8 = 1;
    /// A certified bound or proven property failed.
    pub const VIOLATION: u8 = 2;
}
