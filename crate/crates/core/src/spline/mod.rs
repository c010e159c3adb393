//! Clamped cubic B-spline trajectories, a penalty-based optimizer that pushes
//! sampled footprints out of obstacles under kinodynamic limits, and the
//! fail-safe check for returning to a reference path.

mod basis;
mod optimize;
mod recover;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose2D, ReferencePath, Vec2};

pub use basis::{clamped_uniform_knots, ders_basis, find_span, DEGREE};
pub use optimize::{
    check_kinodynamic, find_collision_records, objective, objective_gradient, optimize, verify, CollisionRecord,
    KinodynamicLimits, LimitKind, LimitViolation, NotConverged, OptimizationReport, OptimizationWeights, World,
};
pub use recover::{check_recoverable, check_recoverable_with, recovery_problem, RecoveryConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("invalid spline: {0}")]
    InvalidSpline(&'static str),
    #[error("projection onto the reference path failed: {0}")]
    ProjectionFailure(GeometryError),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("optimizer did not converge after {} iterations", .0.report.iterations)]
    NotConverged(Box<NotConverged>),
}

/// Clamped cubic B-spline in the plane, traversed uniformly in time:
/// parameter `u ∈ [0, 1]` is reached at `t = u · duration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BSplineTrajectory {
    pub degree: usize,
    pub control_points: Vec<Vec2>,
    pub knots: Vec<f64>,
    pub duration: f64,
}

/// Kinematic quantities at one parameter value. Velocity and acceleration
/// are time derivatives; curvature is 0 where the tangent vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplinePoint {
    pub position: Vec2,
    pub velocity: Vec2,
    pub acceleration: Vec2,
    pub curvature: f64,
}

impl SplinePoint {
    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    /// Tangent heading, or `None` at a stationary point.
    pub fn heading(&self) -> Option<f64> {
        (self.velocity.norm_sq() > 0.0).then(|| self.velocity.angle())
    }
}

/// Below this squared tangent norm the curve counts as stationary.
pub(crate) const STATIONARY_EPS: f64 = 1e-18;

impl BSplineTrajectory {
    pub fn new(control_points: Vec<Vec2>, duration: f64) -> Result<Self, SplineError> {
        let t = Self {
            degree: DEGREE,
            knots: clamped_uniform_knots(control_points.len()),
            control_points,
            duration,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        if self.degree != DEGREE {
            return Err(SplineError::InvalidSpline("only cubic splines are supported"));
        }
        if self.control_points.len() < DEGREE + 1 {
            return Err(SplineError::InvalidSpline("need at least 4 control points"));
        }
        if self.knots.len() != self.control_points.len() + DEGREE + 1 {
            return Err(SplineError::InvalidSpline("knot count must be control points + 4"));
        }
        if self.knots.windows(2).any(|w| w[1] < w[0]) || self.knots.iter().any(|k| !k.is_finite()) {
            return Err(SplineError::InvalidSpline("knots must be finite and non-decreasing"));
        }
        let (first, last) = (self.knots[0], self.knots[self.knots.len() - 1]);
        let clamped = self.knots[..=DEGREE].iter().all(|&k| k == first)
            && self.knots[self.knots.len() - DEGREE - 1..].iter().all(|&k| k == last);
        if !clamped || first != 0.0 || last != 1.0 {
            return Err(SplineError::InvalidSpline("knots must be clamped on [0, 1]"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SplineError::InvalidSpline("duration must be positive"));
        }
        if self.control_points.iter().any(|p| !p.is_finite()) {
            return Err(SplineError::InvalidSpline("non-finite control point"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.control_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control_points.is_empty()
    }

    /// Spatial derivatives of orders 0..=2 with respect to `u`.
    pub fn derivatives(&self, u: f64) -> [Vec2; 3] {
        let u = u.clamp(0.0, 1.0);
        let span = find_span(&self.knots, self.len(), u);
        let n = ders_basis(span, u, &self.knots);
        let mut out = [Vec2::ZERO; 3];
        for (k, o) in out.iter_mut().enumerate() {
            for j in 0..=DEGREE {
                *o += self.control_points[span - DEGREE + j] * n[k][j];
            }
        }
        out
    }

    pub fn position(&self, u: f64) -> Vec2 {
        self.derivatives(u)[0]
    }

    pub fn evaluate(&self, u: f64) -> SplinePoint {
        let [p, d1, d2] = self.derivatives(u);
        let n2 = d1.norm_sq();
        let curvature = if n2 > STATIONARY_EPS {
            d1.cross(d2) / (n2 * n2.sqrt())
        } else {
            0.0
        };
        SplinePoint {
            position: p,
            velocity: d1 * (1.0 / self.duration),
            acceleration: d2 * (1.0 / (self.duration * self.duration)),
            curvature,
        }
    }

    /// Pose at `u`; where the tangent vanishes the heading is taken from
    /// the nearest control-polygon direction.
    pub fn pose(&self, u: f64) -> Pose2D {
        let [p, d1, _] = self.derivatives(u);
        let heading = if d1.norm_sq() > STATIONARY_EPS {
            d1.angle()
        } else {
            self.fallback_heading(u)
        };
        Pose2D::from_position(p, heading)
    }

    fn fallback_heading(&self, u: f64) -> f64 {
        let cp = &self.control_points;
        let last = cp.len() - 2;
        let i = ((u * last as f64).round() as usize).min(last);
        // search outwards from the nearest leg of the control polygon
        for r in 0..=last {
            for j in [i.checked_add(r), i.checked_sub(r)].into_iter().flatten() {
                if j <= last {
                    if let Some(d) = (cp[j + 1] - cp[j]).normalized() {
                        return d.angle();
                    }
                }
            }
        }
        0.0
    }

    /// Parameter values `k / (n - 1)` for `k = 0..n`.
    pub fn sample_params(n: usize) -> impl Iterator<Item = f64> {
        let m = n.max(2) - 1;
        (0..=m).map(move |k| k as f64 / m as f64)
    }
}

/// Spline from `start` to `goal` whose control points sit at equal arc-length
/// spacing along `path` between the two projections. The end control points
/// are the start and goal positions themselves.
pub fn init_from_reference(
    path: &ReferencePath,
    start: &Pose2D,
    goal: &Pose2D,
    n_ctrl: usize,
    duration: f64,
) -> Result<BSplineTrajectory, SplineError> {
    if n_ctrl < DEGREE + 1 {
        return Err(SplineError::InvalidArgument("n_ctrl must be at least 4"));
    }
    let (s0, _) = path.project(start.position()).map_err(SplineError::ProjectionFailure)?;
    let (s1, _) = path.project(goal.position()).map_err(SplineError::ProjectionFailure)?;
    let mut cps: Vec<Vec2> = (0..n_ctrl)
        .map(|k| path.point_at(s0 + (s1 - s0) * k as f64 / (n_ctrl - 1) as f64).0)
        .collect();
    cps[0] = start.position();
    cps[n_ctrl - 1] = goal.position();
    BSplineTrajectory::new(cps, duration)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_spline() {
        let t = BSplineTrajectory::new(vec![Vec2::new(1.0, 2.0); 5], 3.0).unwrap();
        for u in BSplineTrajectory::sample_params(11) {
            let p = t.evaluate(u);
            assert!((p.position - Vec2::new(1.0, 2.0)).norm() < 1e-14);
            assert!(p.speed() < 1e-12);
            assert_eq!(p.curvature, 0.0);
        }
    }

    #[test]
    fn collinear_has_zero_curvature() {
        let cps: Vec<Vec2> = (0..7).map(|i| Vec2::new(i as f64, 0.5 * i as f64)).collect();
        let t = BSplineTrajectory::new(cps, 2.0).unwrap();
        for u in BSplineTrajectory::sample_params(50) {
            assert!(t.evaluate(u).curvature.abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints_interpolate() {
        let cps = vec![
            Vec2::new(0.3, -1.0),
            Vec2::new(2.0, 4.0),
            Vec2::new(5.0, -3.0),
            Vec2::new(7.0, 1.0),
            Vec2::new(9.5, 2.25),
        ];
        let t = BSplineTrajectory::new(cps.clone(), 1.0).unwrap();
        assert_eq!(t.position(0.0), cps[0]);
        assert_eq!(t.position(1.0), cps[4]);
    }

    #[test]
    fn time_law_scales_derivatives() {
        let cps: Vec<Vec2> = (0..6).map(|i| Vec2::new(i as f64, (i * i) as f64 * 0.1)).collect();
        let a = BSplineTrajectory::new(cps.clone(), 1.0).unwrap().evaluate(0.4);
        let b = BSplineTrajectory::new(cps, 2.0).unwrap().evaluate(0.4);
        assert!((a.velocity * 0.5 - b.velocity).norm() < 1e-12);
        assert!((a.acceleration * 0.25 - b.acceleration).norm() < 1e-12);
        assert!((a.curvature - b.curvature).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed() {
        assert!(BSplineTrajectory::new(vec![Vec2::ZERO; 3], 1.0).is_err());
        assert!(BSplineTrajectory::new(vec![Vec2::ZERO; 4], 0.0).is_err());
        let mut t = BSplineTrajectory::new(vec![Vec2::ZERO; 5], 1.0).unwrap();
        t.knots[1] = 0.1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn init_on_straight_path_is_the_segment() {
        let path = ReferencePath::straight(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)).unwrap();
        let t = init_from_reference(&path, &Pose2D::new(1.0, 0.0, 0.0), &Pose2D::new(9.0, 0.0, 0.0), 6, 4.0).unwrap();
        assert_eq!(t.position(0.0), Vec2::new(1.0, 0.0));
        assert_eq!(t.position(1.0), Vec2::new(9.0, 0.0));
        for u in BSplineTrajectory::sample_params(20) {
            assert!(t.position(u).y.abs() < 1e-12);
        }
    }
}
