//! Planning and perception for autonomous ground vehicles on airfields,
//! indoor concourses and urban roads, with a deterministic 2D simulator.
//!
//! * [`geometry`]: poses, footprints, polygons, Frenet frames, swept volumes
//! * [`fusion`]: camera/LiDAR over-segment merging by CRF energy minimization
//! * [`intention`]: Bayesian aircraft intention classifier
//! * [`occlusion`]: occluded-region reachability and velocity caps
//! * [`spline`]: B-spline trajectory optimization and recoverability check
//! * [`iahrl`]: lattice behaviors plus an attention policy trained by policy gradient
//! * [`sim`]: kinematic simulator, scenario generators and metrics

// Numeric kernels index several arrays in lockstep, and `!(x > 0.0)` is the
// intended way to reject NaN along with non-positive values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod fusion;
pub mod geometry;
pub mod iahrl;
pub mod intention;
pub mod occlusion;
pub mod par;
pub mod sim;
pub mod spline;
