//! Deterministic 2D simulator: kinematic bicycle ego, scripted agents,
//! scenario generators and episode metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose2D};
use crate::iahrl::IahrlError;
use crate::occlusion::OcclusionError;
use crate::spline::SplineError;

pub mod episode;
pub mod eval;
pub mod scenario;

pub use episode::{
    run_episode, AgentTrace, BehaviorChooser, Decision, EpisodeOutcome, EpisodeResult, PolicyChooser, RecordedDecision,
    RuleChooser, StackConfig, StackMode, TraceRecord,
};
pub use eval::{evaluate, metrics_csv, run_with, summary_csv, Aggregate, MetricsRow, MetricsTable, Planner};
pub use scenario::{
    default_ramp_model, generate_scenario, AgentKind, AgentSpec, EgoSpec, RampSpec, Scenario, ScenarioKind,
    ScenarioParams, Trigger, CORRIDOR_SPEED, PASSAGE_LENGTH, SCHEMA_VERSION,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid params: {0}")]
    InvalidParams(String),
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Occlusion(#[from] OcclusionError),
    #[error(transparent)]
    Planner(#[from] IahrlError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Kinematic bicycle state; the pose is the rear-axle center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2D,
    pub speed: f64,
    pub steering: f64,
    pub wheelbase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub accel: f64,
    pub steering_rate: f64,
}

/// One explicit-Euler step. Speed is floored at zero and the steering angle
/// clamped to `±steer_limit`.
pub fn step(state: &VehicleState, cmd: Command, dt: f64, steer_limit: f64) -> VehicleState {
    let th = state.pose.heading();
    let v = state.speed;
    let pose = Pose2D::new(
        state.pose.x + v * th.cos() * dt,
        state.pose.y + v * th.sin() * dt,
        th + v * state.steering.tan() / state.wheelbase * dt,
    );
    VehicleState {
        pose,
        speed: (v + cmd.accel * dt).max(0.0),
        steering: (state.steering + cmd.steering_rate * dt).clamp(-steer_limit, steer_limit),
        wheelbase: state.wheelbase,
    }
}
