//! Synthetic event streams with ground truth, the frame-batching bundle
//! adjustment baseline, trajectory metrics and the text file formats.

pub mod baseline;
pub mod batch;
pub mod generate;
pub mod io;
pub mod metrics;
pub mod scenario;

use thiserror::Error;

pub use baseline::{frame_based_ba, BaselineConfig, BaselineResult};
pub use batch::{batch_events, Batching, EventFrame};
pub use generate::{generate_events, SimOutput};
pub use metrics::{metrics_rpe_ate, Alignment, TrajectoryMetrics};
pub use scenario::{ScenarioConfig, SimScenario, TrajectoryKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("every landmark stays behind the camera; the stream would be empty")]
    EmptyStream,
    #[error("need at least 2 usable frames, got {usable}")]
    TooFewFrames { usable: usize },
    #[error("baseline failed: {0}")]
    Baseline(String),
    #[error("estimate and ground truth share no timestamps")]
    NoOverlap,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Graph(#[from] ctvo_core::graph::GraphError),
    #[error(transparent)]
    Gp(#[from] ctvo_core::gp::GpError),
    #[error(transparent)]
    Lie(#[from] ctvo_core::LieError),
}
