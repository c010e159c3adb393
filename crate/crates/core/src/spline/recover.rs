use serde::{Deserialize, Serialize};

use super::optimize::{optimize, KinodynamicLimits, OptimizationWeights, World};
use super::BSplineTrajectory;
use crate::geometry::{Footprint, Pose2D, ReferencePath, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    /// Arc length ahead of the nearest path point where the recovery ends.
    pub lookahead: f64,
    pub n_ctrl: usize,
    /// Planned mean speed as a fraction of `v_max`.
    pub speed_fraction: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            lookahead: 5.0,
            n_ctrl: 8,
            speed_fraction: 0.5,
        }
    }
}

/// Initial spline from `pose` to the path point `lookahead` ahead of the
/// nearest one, leaving along the current heading and arriving along the
/// path tangent. `None` when that target coincides with the pose.
pub fn recovery_problem(
    pose: &Pose2D,
    path: &ReferencePath,
    limits: &KinodynamicLimits,
    cfg: &RecoveryConfig,
) -> Option<BSplineTrajectory> {
    let (s, _) = path.nearest(pose.position());
    let target = (s + cfg.lookahead).min(path.length());
    let (goal, goal_heading) = path.point_at(target);
    let start = pose.position();
    let chord = goal.distance(start);
    if chord < 1e-6 {
        return None;
    }
    let n = cfg.n_ctrl.max(6);
    // end legs this long make the end speed equal the mean chord speed
    let h = chord / (3 * (n - 3)) as f64;
    let c1 = start + Vec2::from_angle(pose.heading()) * h;
    let c2 = goal - Vec2::from_angle(goal_heading) * h;
    let mut cps = Vec::with_capacity(n);
    cps.push(start);
    for k in 0..n - 2 {
        cps.push(c1.lerp(c2, k as f64 / (n - 3) as f64));
    }
    cps.push(goal);
    let length: f64 = cps.windows(2).map(|w| w[0].distance(w[1])).sum();
    let duration = length / (cfg.speed_fraction * limits.v_max);
    BSplineTrajectory::new(cps, duration).ok()
}

/// Whether a collision-free, limit-respecting spline leads from `pose` back
/// onto `path`.
pub fn check_recoverable(
    pose: &Pose2D,
    path: &ReferencePath,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    w: &OptimizationWeights,
) -> bool {
    check_recoverable_with(pose, path, world, fp, limits, w, &RecoveryConfig::default())
}

pub fn check_recoverable_with(
    pose: &Pose2D,
    path: &ReferencePath,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    w: &OptimizationWeights,
    cfg: &RecoveryConfig,
) -> bool {
    let Some(init) = recovery_problem(pose, path, limits, cfg) else {
        return world.clearance(pose, fp, w.clearance_margin + 1.0) >= w.clearance_margin;
    };
    let w = OptimizationWeights {
        pin_tangents: true,
        ..*w
    };
    matches!(optimize(&init, world, fp, limits, &w), Ok((_, r)) if r.converged)
}
