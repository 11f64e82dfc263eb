//! Experiment harness for the adaptive TD(λ) laboratory: config files, seed
//! fans, ablation grids, metric reports and oracle certificate suites.

pub mod config_file;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod report;

pub use config_file::{parse_config, parse_config_with_env, parse_with_overrides, render_config};
pub use error::{LabError, LabResult};
pub use experiment::{run_ablation, run_experiment, AblationReport, CellReport, Grid, RunOptions};
pub use oracle::{oracle_check, OracleReport, Suite};
pub use report::{parse_csv, records_to_csv, smooth, Summary, CSV_HEADER};

/// Process exit codes used by the CLI.
pub mod exit {
    pub const OK: u8 = 0;
    pub const RUN_FAILURE: u8 = 1;
    pub const CONFIG_ERROR: u8 = 2;
    pub const CERTIFICATE_FAILURE: u8 = 3;
}
