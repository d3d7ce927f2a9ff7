//! Command-line front end: config files, training runs, ablations and
//! spectrum export.

pub mod config;
pub mod experiment;

use spectral_forecaster::{Error, ErrorKind};

pub use config::{parse_list, ConfigError, DatasetConfig, ExperimentConfig};
pub use experiment::{
    ablate_alpha, ablate_layers, ablate_placement, export_spectra, run, AblationRow, HorizonReport,
    RunReport, SpectraExport,
};

/// Process exit code: 2 config, 3 data, 4 numeric, 1 for anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            };
        }
    }
    1
}
