// `!(a > b)` is used on purpose so NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::too_many_arguments)]

pub mod camera;
pub mod engine;
pub mod event;
pub mod gp;
pub mod graph;
pub mod lie;
pub mod scalar;

pub use camera::{CameraIntrinsics, Landmark};
pub use event::{EventObservation, Polarity};
pub use gp::{ControlState, TrajectoryGP, WnoaPrior};
pub use graph::{FactorGraph, Values, VariableIndex};
pub use lie::{LieError, SE3Pose, Twist};
pub use scalar::Real;

pub type Pose = SE3Pose<f64>;
pub type State = ControlState<f64>;
pub type Trajectory = TrajectoryGP<f64>;
pub type Graph = FactorGraph<f64>;
pub type Event = EventObservation<f64>;
pub type Intrinsics = CameraIntrinsics<f64>;
pub type Estimator = engine::Engine<f64>;
pub type EstimatorConfig = engine::EngineConfig<f64>;
