use thiserror::Error;

use crate::world::Violation;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid world: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidWorld(Vec<Violation>),

    #[error("forbidden flow: residence {i}, source {l}, booking {h}")]
    ForbiddenFlow { i: usize, l: usize, h: usize },

    #[error("divergent expected profit: upsilon1 = {upsilon1} must exceed sigma - 1 = {bound}")]
    DivergentProfit { upsilon1: f64, bound: f64 },

    #[error("non-finite value in {0}; inputs too extreme even for the log-domain evaluation")]
    NonFinite(&'static str),

    #[error("effective tax rate {rate} reaches 1 at ({i}, {l}, {o})")]
    RateAtOne { i: usize, l: usize, o: usize, rate: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("labor market infeasible in country {0}: entry labor exceeds endowment")]
    LaborInfeasible(usize),

    #[error("negative expenditure in country {0}")]
    NegativeExpenditure(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("inconsistent totals: {0}")]
    InconsistentTotals(String),

    #[error("estimation: {0}")]
    Estimation(#[from] shiftsim_estimators::EstimationError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse: {0}")]
    Parse(String),

    #[error("stage={stage}, {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ModelError>,
    },
}

impl ModelError {
    /// Innermost error with stage tags removed.
    pub fn root(&self) -> &ModelError {
        match self {
            ModelError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Tags an error with the pipeline stage it came from.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<ModelError>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| ModelError::Stage { stage, source: Box::new(e.into()) })
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
