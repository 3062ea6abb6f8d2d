//! Library side of the `ctvo` command: configuration, reports and the
//! simulate / run-async / run-baseline / compare commands.

pub mod config;
pub mod report;
pub mod run;

use thiserror::Error;

pub use config::{BaselineRunConfig, InitializerConfig, RunConfig};
pub use report::{RunMode, RunReport};
pub use run::{cmd_compare, cmd_run_async, cmd_run_baseline, cmd_simulate, run_async, run_baseline, InputData, RunOutput};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    UnsupportedInput(String),
    #[error("bootstrap never succeeded over {} events", report.event_count)]
    Bootstrap { report: Box<RunReport> },
    #[error("{0}")]
    Report(String),
    #[error("{0}")]
    Compare(String),
    #[error(transparent)]
    Sim(#[from] ctvo_sim::SimError),
    #[error(transparent)]
    Engine(#[from] ctvo_core::engine::EngineError),
}

impl CliError {
    /// Stable machine-readable code printed as `error[code]`.
    pub fn code(&self) -> &'static str {
        use ctvo_sim::SimError;
        match self {
            Self::Config(_) | Self::Sim(SimError::Config(_)) => "config",
            Self::Io(_) | Self::Sim(SimError::Io(_)) => "io",
            Self::Sim(SimError::Parse { .. }) => "parse",
            Self::UnsupportedInput(_) => "unsupported_input",
            Self::Bootstrap { .. } => "bootstrap_failed",
            Self::Report(_) => "report",
            Self::Compare(_) | Self::Sim(SimError::NoOverlap) => "compare",
            Self::Sim(_) => "sim",
            Self::Engine(_) => "engine",
        }
    }

    /// `error[code]: text` on one line.
    pub fn render(&self) -> String {
        let text = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {text}", self.code())
    }
}
