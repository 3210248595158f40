//! Failure classes and their exit codes.

use radimu::estimator::EstimatorError;
use radimu::init::InitError;
use radimu::pipeline::PipelineError;
use radimu::solver::SolverError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or inconsistent configuration.
    #[error("{0}")]
    Config(String),
    /// Missing, malformed or insufficient data.
    #[error("{0}")]
    Data(String),
    /// The solver failed or did not converge.
    #[error("{0}")]
    Convergence(String),
    /// Malformed command line.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    kind: &'a str,
    message: String,
    exit_code: i32,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Convergence(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Convergence(_) => "convergence",
            CliError::Usage(_) => "usage",
            CliError::Other(_) => "other",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        let e = ErrorJson { kind: self.kind(), message: self.to_string(), exit_code: self.exit_code() };
        serde_json::json!({ "error": e }).to_string()
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::NoResiduals => CliError::Data(e.to_string()),
            SolverError::NonFinite { .. } | SolverError::RankDeficient { .. } => CliError::Convergence(e.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Solver(s) => s.into(),
            EstimatorError::InvalidConfig(_) => CliError::Config(e.to_string()),
            EstimatorError::Spline(_) | EstimatorError::Mismatch(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<InitError> for CliError {
    fn from(e: InitError) -> Self {
        match e {
            InitError::Estimator(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Init(e) => e.into(),
            PipelineError::Estimator(e) => e.into(),
        }
    }
}

impl From<radimu::io::IoError> for CliError {
    fn from(e: radimu::io::IoError) -> Self {
        CliError::Data(e.to_string())
    }
}
