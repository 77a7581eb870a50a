use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use trapforge::chain::ChainError;
use trapforge::electrostatics::BemError;
use trapforge::geometry::GeometryError;
use trapforge::potentials::PotentialError;
use trapforge::single_ion::SingleIonError;
use trapforge::source::FieldError;
use trapforge::voltage_solver::width::WidthStudyError;
use trapforge::voltage_solver::{SynthesisError, VoltageSetError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config {
        path: PathBuf,
        field: Option<String>,
        message: String,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already exists; outputs are never overwritten")]
    OutputExists(PathBuf),
    #[error("geometry failed validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Basis(#[from] BemError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    SingleIon(#[from] SingleIonError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    WidthStudy(#[from] WidthStudyError),
    #[error("{path}: {source}")]
    VoltageSet { path: PathBuf, source: VoltageSetError },
}

/// Machine-readable form written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
    pub version: &'static str,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::OutputExists(_) => "output_exists",
            CliError::Validation(_) => "validation",
            CliError::Geometry(_) => "geometry",
            CliError::Basis(_) => "basis",
            CliError::Potential(_) => "potential",
            CliError::Field(_) => "field",
            CliError::SingleIon(_) => "single_ion",
            CliError::Chain(_) => "chain",
            CliError::Synthesis(_) => "voltages",
            CliError::WidthStudy(_) => "width_study",
            CliError::VoltageSet { .. } => "voltage_set",
        }
    }

    pub fn field(&self) -> Option<String> {
        match self {
            CliError::Config { field, .. } => field.clone(),
            CliError::Geometry(GeometryError::InvalidParam { field, .. }) => Some(format!("geometry.{field}")),
            CliError::Potential(PotentialError::Drive { field, .. }) => Some(format!("drive.{field}")),
            CliError::Synthesis(SynthesisError::Targets { field, .. }) => Some(format!("voltages.{field}")),
            _ => None,
        }
    }

    /// 2 for bad input, 1 for failures of the analysis itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. }
            | CliError::Geometry(_)
            | CliError::VoltageSet { .. }
            | CliError::Synthesis(SynthesisError::Targets { .. })
            | CliError::Potential(PotentialError::Drive { .. } | PotentialError::Species(_)) => 2,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            kind: self.kind(),
            field: self.field(),
            message: self.to_string(),
            version: trapforge::VERSION,
        }
    }
}

pub fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
