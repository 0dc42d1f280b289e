//! Reproducible experiments: scenarios, the centralised reference solver,
//! the linearisation check, and trace output.

mod approx_check;
mod oracle;
mod scenario;
mod trace;

use thiserror::Error;

pub use approx_check::{approximation_check, ApproxErrorRow};
pub use oracle::{
    centralized_oracle, kkt_residuals, nonlinear_losses, InjectionSplit, KktResiduals,
    OracleError, OracleMethod, OracleSolution, ENUMERATION_LIMIT,
};
pub use scenario::{
    run_scenario, GammaSpec, LoadOverride, Mode, NoiseEntry, ProfileEntry, Scenario, ScenarioFile,
};
pub use trace::{emit, read_csv, write_csv, write_svg, EmitFormat, SimTrace, TraceRow};

use crate::agents::AgentError;
use crate::approx::ModelError;
use crate::grid::GridError;
use crate::powerflow::PowerFlowError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("run diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        /// Rows recorded before the failure.
        trace: Box<SimTrace>,
        #[source]
        source: AgentError,
    },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Grid(_) => "grid",
            HarnessError::Model(_) => "model",
            HarnessError::Agent(_) => "agent",
            HarnessError::PowerFlow(_) => "powerflow",
            HarnessError::Oracle(_) => "oracle",
            HarnessError::Diverged { .. } => "diverged",
            HarnessError::Scenario(_) => "scenario",
            HarnessError::Io(_) => "io",
            HarnessError::Csv(_) => "csv",
        }
    }
}
