//! Command errors mapped onto scriptable exit codes:
//! 0 success, 2 configuration, 3 data, 4 numerical failure.

use riskgp::autodiff::AdError;
use riskgp::checkpoint::CheckpointError;
use riskgp::data::DataError;
use riskgp::kernel::KernelError;
use riskgp::metrics::MetricsError;
use riskgp::model::ModelError;
use riskgp::predict::PredictError;
use riskgp::svgp::SvgpError;
use riskgp::train::TrainError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadConfig { .. } | DataError::BadRatios => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig { .. } | ModelError::DimMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            ModelError::Untrained => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::MissingSplit { .. } => CliError::Data(e.to_string()),
            TrainError::Model(inner) => inner.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Untrained
            | PredictError::TooFewSamples(_)
            | PredictError::TooFewPatients(_)
            | PredictError::EmptyRetained(_) => CliError::Config(e.to_string()),
            PredictError::Model(inner) => inner.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<SvgpError> for CliError {
    fn from(e: SvgpError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<AdError> for CliError {
    fn from(e: AdError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
