//! Hierarchical planner: a Frenet lattice proposes ego behaviors and an
//! attention policy over the imagined behaviors of all vehicles picks one.

use thiserror::Error;

use crate::geometry::GeometryError;

pub mod lattice;
pub mod network;
pub mod train;

pub use lattice::{
    imagine_ego_behaviors, nominal_index, predict_surrounding, quartic_to_speed, quintic_to_rest, BehaviorSample,
    CostWeights, EgoLimits, EgoState, ImaginedBehavior, LatticeConfig, PlannerState, Poly, SurroundingObservation,
};
pub use network::{
    behavior_features, gradient_check, ActMode, Action, AttentionPolicy, Forward, PolicyConfig, SeedVector, FEATURE_DIM,
};
pub use train::{train, LearningRow, TrainConfig, TrainOutput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IahrlError {
    #[error("no feasible behavior")]
    NoFeasibleBehavior,
    #[error("behaviors have different horizons")]
    InconsistentHorizon,
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("training diverged at update {update}: {reason}")]
    DivergedTraining { update: usize, reason: String },
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
