//! Experiment orchestration: configuration files, the preset catalog,
//! repeated runs and metric files.

mod config;
mod presets;
mod run;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;

pub use config::{parse_config, DatasetSpec, ExperimentConfig, ModelChoice, PartitionSpec, REQUIRED_KEYS};
pub use presets::{
    config_update_amount, preset, Preset, PresetKind, ToyPreset, Variant, CATALOG, DESK_ETA, DESK_HIDDEN,
    DESK_ROUNDS, DESK_SPREAD,
};
pub use run::{
    build_clients, desk_variant, load_data, resolve_out_dir, run_experiment, run_preset, run_toy, RepeatRecord,
    RunManifest, RunOptions, AGGREGATE_HEADER, CLIENTS_HEADER, COSINE_HEADER, METRICS_HEADER, OUT_ENV,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error{}: {message}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn config(line: Option<usize>, message: impl Into<String>) -> Self {
        HarnessError::Config { line, message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 configuration, 2 runtime or divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 1,
            HarnessError::Data(DataError::Config(_)) => 1,
            HarnessError::Io { .. } => 3,
            HarnessError::Data(DataError::Io { .. } | DataError::Format { .. }) => 3,
            HarnessError::Data(_) | HarnessError::Runtime(_) => 2,
        }
    }
}
