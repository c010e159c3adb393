use serde::{Deserialize, Serialize};

use super::basis::{ders_basis, find_span, DEGREE};
use super::{BSplineTrajectory, SplineError, STATIONARY_EPS};
use crate::geometry::{footprint_polygon, polygon_clearance, Footprint, Polygon, Pose2D, Vec2, Witness};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinodynamicLimits {
    pub v_max: f64,
    pub a_max: f64,
    pub curvature_max: f64,
    pub lateral_a_max: f64,
}

impl KinodynamicLimits {
    pub fn validate(&self) -> Result<(), SplineError> {
        let all = [self.v_max, self.a_max, self.curvature_max, self.lateral_a_max];
        if all.iter().all(|x| *x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(SplineError::InvalidArgument("kinodynamic limits must be positive"))
        }
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            v_max: self.v_max * f,
            a_max: self.a_max * f,
            curvature_max: self.curvature_max * f,
            lateral_a_max: self.lateral_a_max * f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationWeights {
    pub w_obstacle: f64,
    pub w_smooth: f64,
    pub w_kino: f64,
    pub clearance_margin: f64,
    pub step_size: f64,
    pub max_iterations: usize,
    /// Samples per collision and limit sweep.
    pub n_samples: usize,
    /// Extra clearance the penalty aims for beyond the margin.
    pub buffer: f64,
    /// Fraction by which the penalty tightens every kinodynamic limit.
    pub kino_slack: f64,
    /// Reject objective increases and halve the step instead.
    pub step_halving: bool,
    /// Also hold the second and second-to-last control points, fixing the
    /// end tangents.
    pub pin_tangents: bool,
}

impl Default for OptimizationWeights {
    fn default() -> Self {
        Self {
            w_obstacle: 100.0,
            w_smooth: 1.0,
            w_kino: 10.0,
            clearance_margin: 0.1,
            step_size: 0.004,
            max_iterations: 2000,
            n_samples: 100,
            buffer: 0.03,
            kino_slack: 0.03,
            step_halving: true,
            pin_tangents: false,
        }
    }
}

impl OptimizationWeights {
    pub fn validate(&self) -> Result<(), SplineError> {
        let w = [
            self.w_obstacle,
            self.w_smooth,
            self.w_kino,
            self.clearance_margin,
            self.buffer,
        ];
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(SplineError::InvalidArgument(
                "weights and margins must be finite and >= 0",
            ));
        }
        if !(self.step_size > 0.0) || self.max_iterations == 0 || self.n_samples < 2 {
            return Err(SplineError::InvalidArgument(
                "step_size must be positive, max_iterations >= 1, n_samples >= 2",
            ));
        }
        if !(0.0..1.0).contains(&self.kino_slack) {
            return Err(SplineError::InvalidArgument("kino_slack must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A sampled pose closer than the margin to one obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRecord {
    pub u: f64,
    pub pose: Pose2D,
    pub obstacle: usize,
    /// Push that would restore the margin: `(margin - signed distance)`
    /// along the exit direction.
    pub penetration_vector: Vec2,
}

impl CollisionRecord {
    pub fn depth(&self) -> f64 {
        self.penetration_vector.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LimitKind {
    Speed,
    Acceleration,
    Curvature,
    LateralAcceleration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitViolation {
    pub u: f64,
    pub kind: LimitKind,
    pub value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub converged: bool,
    pub iterations: usize,
    /// Largest shortfall below the clearance margin at the final iterate.
    pub max_penetration: f64,
    pub limit_violations: usize,
    /// Smallest signed clearance at the verification density.
    pub min_clearance: f64,
    pub objective: f64,
    /// Objective after each accepted iteration, starting with the initial value.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NotConverged {
    pub trajectory: BSplineTrajectory,
    pub report: OptimizationReport,
}

/// Obstacles with cached bounding boxes for a cheap distance pre-check.
#[derive(Debug, Clone)]
pub struct World {
    obstacles: Vec<Polygon>,
    bounds: Vec<(Vec2, Vec2)>,
}

impl World {
    pub fn new(obstacles: Vec<Polygon>) -> Self {
        let bounds = obstacles.iter().map(|o| o.bounds()).collect();
        Self { obstacles, bounds }
    }

    pub fn obstacles(&self) -> &[Polygon] {
        &self.obstacles
    }

    /// Obstacles whose bounding box lies within `reach` of `p`.
    fn near(&self, p: Vec2, reach: f64) -> impl Iterator<Item = (usize, &Polygon)> + '_ {
        self.obstacles.iter().enumerate().filter(move |(i, _)| {
            let (lo, hi) = self.bounds[*i];
            let dx = (lo.x - p.x).max(p.x - hi.x).max(0.0);
            let dy = (lo.y - p.y).max(p.y - hi.y).max(0.0);
            dx * dx + dy * dy <= reach * reach
        })
    }

    /// Smallest signed clearance between the footprint at `pose` and any
    /// obstacle, capped at `cap`.
    pub fn clearance(&self, pose: &Pose2D, fp: &Footprint, cap: f64) -> f64 {
        let poly = footprint_polygon(pose, fp);
        self.near(pose.position(), fp.circumradius() + cap)
            .map(|(_, o)| polygon_clearance(&poly, o).signed_distance())
            .fold(cap, f64::min)
    }
}

/// Samples `n_samples` poses and reports every (pose, obstacle) pair whose
/// signed clearance is strictly below `margin`.
pub fn find_collision_records(
    traj: &BSplineTrajectory,
    world: &World,
    fp: &Footprint,
    n_samples: usize,
    margin: f64,
) -> Vec<CollisionRecord> {
    let mut out = Vec::new();
    let reach = fp.circumradius() + margin.max(0.0);
    for u in BSplineTrajectory::sample_params(n_samples) {
        let pose = traj.pose(u);
        let poly = footprint_polygon(&pose, fp);
        for (i, o) in world.near(pose.position(), reach) {
            let c = polygon_clearance(&poly, o);
            let sd = c.signed_distance();
            if sd < margin {
                out.push(CollisionRecord {
                    u,
                    pose,
                    obstacle: i,
                    penetration_vector: c.direction * (margin - sd),
                });
            }
        }
    }
    out
}

/// Samples where speed, acceleration, curvature or lateral acceleration exceed the limits.
pub fn check_kinodynamic(
    traj: &BSplineTrajectory,
    limits: &KinodynamicLimits,
    n_samples: usize,
) -> Vec<LimitViolation> {
    let mut out = Vec::new();
    for u in BSplineTrajectory::sample_params(n_samples) {
        let p = traj.evaluate(u);
        let v = p.speed();
        let checks = [
            (LimitKind::Speed, v, limits.v_max),
            (LimitKind::Acceleration, p.acceleration.norm(), limits.a_max),
            (LimitKind::Curvature, p.curvature.abs(), limits.curvature_max),
            (
                LimitKind::LateralAcceleration,
                v * v * p.curvature.abs(),
                limits.lateral_a_max,
            ),
        ];
        for (kind, value, limit) in checks {
            if value > limit {
                out.push(LimitViolation { u, kind, value, limit });
            }
        }
    }
    out
}

fn free_range(n: usize, pin_tangents: bool) -> std::ops::Range<usize> {
    if pin_tangents && n >= 6 {
        2..n - 2
    } else {
        1..n - 1
    }
}

/// Weighted penalty sum the optimizer descends, with its gradient with
/// respect to every control point (pinned ones included).
pub fn objective_gradient(
    traj: &BSplineTrajectory,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    w: &OptimizationWeights,
) -> (f64, Vec<Vec2>) {
    objective_impl(traj, world, fp, limits, w, w.n_samples, true)
}

pub fn objective(
    traj: &BSplineTrajectory,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    w: &OptimizationWeights,
) -> f64 {
    objective_impl(traj, world, fp, limits, w, w.n_samples, false).0
}

fn objective_impl(
    traj: &BSplineTrajectory,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    w: &OptimizationWeights,
    n_samples: usize,
    want_grad: bool,
) -> (f64, Vec<Vec2>) {
    let cps = &traj.control_points;
    let n = cps.len();
    let mut grad = vec![Vec2::ZERO; if want_grad { n } else { 0 }];
    let mut j = 0.0;

    // smoothness: squared second differences
    if w.w_smooth > 0.0 {
        for i in 1..n - 1 {
            let s = cps[i - 1] - cps[i] * 2.0 + cps[i + 1];
            j += w.w_smooth * s.norm_sq();
            if want_grad {
                let g = s * (2.0 * w.w_smooth);
                grad[i - 1] += g;
                grad[i] -= g * 2.0;
                grad[i + 1] += g;
            }
        }
    }

    let target = w.clearance_margin + w.buffer;
    let lim = limits.scaled(1.0 - w.kino_slack);
    let dur = traj.duration;
    let reach = fp.circumradius() + target;
    for u in BSplineTrajectory::sample_params(n_samples) {
        let span = find_span(&traj.knots, n, u);
        let basis = ders_basis(span, u, &traj.knots);
        let mut d = [Vec2::ZERO; 3];
        for (k, dk) in d.iter_mut().enumerate() {
            for q in 0..=DEGREE {
                *dk += cps[span - DEGREE + q] * basis[k][q];
            }
        }
        let [p, d1, d2] = d;
        let n1 = d1.norm_sq();
        let moving = n1 > STATIONARY_EPS;
        // gradient with respect to the position, first and second derivative
        let mut g0 = Vec2::ZERO;
        let mut g1 = Vec2::ZERO;
        let mut g2 = Vec2::ZERO;

        if w.w_obstacle > 0.0 {
            let pose = if moving {
                Pose2D::from_position(p, d1.angle())
            } else {
                traj.pose(u)
            };
            let poly = footprint_polygon(&pose, fp);
            for (_, o) in world.near(p, reach) {
                let c = polygon_clearance(&poly, o);
                let r = target - c.signed_distance();
                if r <= 0.0 {
                    continue;
                }
                j += 0.5 * w.w_obstacle * r * r;
                if !want_grad {
                    continue;
                }
                let dj = -w.w_obstacle * r;
                g0 += c.direction * dj;
                if moving {
                    let contact = match c.witness {
                        Witness::VertexOfA { vertex, .. } => Some(poly.vertices()[vertex]),
                        Witness::VertexOfB { edge, t, .. } => {
                            let (a, b) = poly.edge(edge);
                            Some(a.lerp(b, t))
                        }
                        Witness::None => None,
                    };
                    if let Some(x) = contact {
                        let dsd_dtheta = c.direction.dot((x - p).perp());
                        g1 += d1.perp() * (dj * dsd_dtheta / n1);
                    }
                }
            }
        }

        if w.w_kino > 0.0 {
            let speed_u = n1.sqrt();
            let v = speed_u / dur;
            if v > lim.v_max && moving {
                let e = v - lim.v_max;
                j += w.w_kino * e * e;
                g1 += d1 * (2.0 * w.w_kino * e / (speed_u * dur));
            }
            let acc_u = d2.norm();
            let a = acc_u / (dur * dur);
            if a > lim.a_max && acc_u > 0.0 {
                let e = a - lim.a_max;
                j += w.w_kino * e * e;
                g2 += d2 * (2.0 * w.w_kino * e / (acc_u * dur * dur));
            }
            if moving {
                let c = d1.cross(d2);
                let sg = if c >= 0.0 { 1.0 } else { -1.0 };
                let ac = c.abs();
                let dc_d1 = Vec2::new(d2.y, -d2.x) * sg;
                let dc_d2 = Vec2::new(-d1.y, d1.x) * sg;
                let s3 = n1 * speed_u;
                let kappa = ac / s3;
                if kappa > lim.curvature_max {
                    let e = kappa - lim.curvature_max;
                    j += w.w_kino * e * e;
                    let k1 = dc_d1 * (1.0 / s3) - d1 * (3.0 * ac / (s3 * n1));
                    let k2 = dc_d2 * (1.0 / s3);
                    g1 += k1 * (2.0 * w.w_kino * e);
                    g2 += k2 * (2.0 * w.w_kino * e);
                }
                let lat = ac / (speed_u * dur * dur);
                if lat > lim.lateral_a_max {
                    let e = lat - lim.lateral_a_max;
                    j += w.w_kino * e * e;
                    let l1 = (dc_d1 * (1.0 / speed_u) - d1 * (ac / (speed_u * n1))) * (1.0 / (dur * dur));
                    let l2 = dc_d2 * (1.0 / (speed_u * dur * dur));
                    g1 += l1 * (2.0 * w.w_kino * e);
                    g2 += l2 * (2.0 * w.w_kino * e);
                }
            }
        }

        if want_grad {
            for q in 0..=DEGREE {
                let i = span - DEGREE + q;
                grad[i] = grad[i] + g0 * basis[0][q] + g1 * basis[1][q] + g2 * basis[2][q];
            }
        }
    }
    (j, grad)
}

/// Smallest signed clearance over `n` samples and the limit violations there.
pub fn verify(
    traj: &BSplineTrajectory,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    margin: f64,
    n: usize,
) -> (f64, usize) {
    let cap = margin + 1.0;
    let min_clear = BSplineTrajectory::sample_params(n)
        .map(|u| world.clearance(&traj.pose(u), fp, cap))
        .fold(cap, f64::min);
    (min_clear, check_kinodynamic(traj, limits, n).len())
}

/// Halving stops once the step shrinks below this fraction of `step_size`.
const MIN_STEP_FRACTION: f64 = 1e-9;

/// Margin tolerance of the dense verification pass.
const VERIFY_TOL: f64 = 1e-6;

struct Status {
    max_penetration: f64,
    violations: usize,
    min_clearance: f64,
    sparse_clean: bool,
    dense_clean: bool,
}

fn status(
    traj: &BSplineTrajectory,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    w: &OptimizationWeights,
    final_pass: bool,
) -> Status {
    let records = find_collision_records(traj, world, fp, w.n_samples, w.clearance_margin);
    let max_penetration = records.iter().map(|r| r.depth()).fold(0.0, f64::max);
    let violations = check_kinodynamic(traj, limits, w.n_samples).len();
    let sparse_clean = records.is_empty() && violations == 0;
    // the dense pass is only informative once the sparse one is clean
    let (min_clearance, dense_clean) = if sparse_clean || final_pass {
        let (c, v) = verify(traj, world, fp, limits, w.clearance_margin, 4 * w.n_samples);
        (c, c >= w.clearance_margin - VERIFY_TOL && v == 0)
    } else {
        (f64::NAN, false)
    };
    Status {
        max_penetration,
        violations,
        min_clearance,
        sparse_clean,
        dense_clean,
    }
}

/// Descends the penalty objective over the free control points.
///
/// Each iteration samples the curve, collects obstacle pushes, smoothness
/// and limit terms into per-control-point gradients and takes one step.
/// The loop ends as soon as the samples are clear of every obstacle by the
/// margin with no limit violation, confirmed by a 4× denser pass; if the
/// sparse pass is clean but the dense one is not, the penalty switches to
/// the dense sampling.
pub fn optimize(
    init: &BSplineTrajectory,
    world: &World,
    fp: &Footprint,
    limits: &KinodynamicLimits,
    w: &OptimizationWeights,
) -> Result<(BSplineTrajectory, OptimizationReport), SplineError> {
    init.validate()?;
    limits.validate()?;
    w.validate()?;
    fp.validate()
        .map_err(|_| SplineError::InvalidArgument("invalid footprint"))?;

    let free = free_range(init.len(), w.pin_tangents);
    let mut traj = init.clone();
    let mut samples = w.n_samples;
    let mut step = w.step_size;
    let (mut j, mut grad) = objective_impl(&traj, world, fp, limits, w, samples, true);
    let mut report = OptimizationReport {
        objective_trace: vec![j],
        ..Default::default()
    };
    let mut best = (j, traj.clone());

    let finish = |traj: BSplineTrajectory, mut report: OptimizationReport, st: Status, j: f64| {
        report.converged = st.sparse_clean && st.dense_clean;
        report.max_penetration = st.max_penetration;
        report.limit_violations = st.violations;
        report.min_clearance = st.min_clearance;
        report.objective = j;
        (traj, report)
    };

    for it in 0..=w.max_iterations {
        let st = status(&traj, world, fp, limits, w, false);
        if st.sparse_clean && st.dense_clean {
            report.iterations = it;
            return Ok(finish(traj, report, st, j));
        }
        if st.sparse_clean && samples == w.n_samples {
            samples = 4 * w.n_samples;
            (j, grad) = objective_impl(&traj, world, fp, limits, w, samples, true);
        }
        if it == w.max_iterations {
            break;
        }
        let mut stalled = false;
        loop {
            let mut cand = traj.clone();
            for i in free.clone() {
                cand.control_points[i] -= grad[i] * step;
            }
            let (cj, cg) = objective_impl(&cand, world, fp, limits, w, samples, true);
            if w.step_halving && cj > j {
                step *= 0.5;
                if step < MIN_STEP_FRACTION * w.step_size {
                    stalled = true;
                    break;
                }
                continue;
            }
            traj = cand;
            j = cj;
            grad = cg;
            report.objective_trace.push(j);
            // let the step recover after a run of halvings
            step = (step * 1.25).min(w.step_size);
            break;
        }
        report.iterations = it + 1;
        if j < best.0 {
            best = (j, traj.clone());
        }
        if stalled {
            break;
        }
    }
    let best_traj = if j <= best.0 { traj } else { best.1 };
    let st = status(&best_traj, world, fp, limits, w, true);
    let bj = objective_impl(&best_traj, world, fp, limits, w, samples, false).0;
    let (trajectory, report) = finish(best_traj, report, st, bj);
    if report.converged {
        return Ok((trajectory, report));
    }
    Err(SplineError::NotConverged(Box::new(NotConverged { trajectory, report })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits() -> KinodynamicLimits {
        KinodynamicLimits {
            v_max: 5.0,
            a_max: 3.0,
            curvature_max: 0.5,
            lateral_a_max: 3.0,
        }
    }

    #[test]
    fn empty_world_has_no_records() {
        let t = BSplineTrajectory::new((0..5).map(|i| Vec2::new(i as f64, 0.0)).collect(), 2.0).unwrap();
        let fp = Footprint::new(2.0, 1.0, 0.0).unwrap();
        assert!(find_collision_records(&t, &World::new(vec![]), &fp, 50, 0.2).is_empty());
    }

    #[test]
    fn footprint_inside_obstacle_points_to_exit() {
        let t = BSplineTrajectory::new((0..5).map(|i| Vec2::new(0.1 * i as f64, 0.0)).collect(), 2.0).unwrap();
        let fp = Footprint::new(1.0, 0.5, 0.0).unwrap();
        let block = Polygon::aabb(Vec2::new(-1.0, -0.6), Vec2::new(2.0, 3.0)).unwrap();
        let r = find_collision_records(&t, &World::new(vec![block]), &fp, 5, 0.0);
        assert_eq!(r.len(), 5);
        for rec in r {
            assert!(rec.depth() > 0.0);
            // the bottom face is nearest
            assert!(rec.penetration_vector.y < 0.0 && rec.penetration_vector.x.abs() < 1e-12);
        }
    }

    #[test]
    fn straight_line_speed() {
        let t = BSplineTrajectory::new((0..6).map(|i| Vec2::new(2.0 * i as f64, 0.0)).collect(), 2.0).unwrap();
        // 10 m in 2 s; the clamped parameterization is not uniform in speed,
        // but its mean is length over duration
        let n = 2001;
        let mean: f64 = BSplineTrajectory::sample_params(n)
            .map(|u| t.evaluate(u).speed())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 5.0).abs() < 0.01);
        assert!(check_kinodynamic(
            &t,
            &KinodynamicLimits {
                v_max: 100.0,
                ..limits()
            },
            100
        )
        .iter()
        .all(|v| v.kind == LimitKind::Acceleration));
    }

    #[test]
    fn free_corridor_is_a_fixed_point() {
        let t = BSplineTrajectory::new((0..8).map(|i| Vec2::new(i as f64, 0.0)).collect(), 4.0).unwrap();
        let fp = Footprint::new(2.0, 1.0, 0.0).unwrap();
        let lim = KinodynamicLimits {
            v_max: 10.0,
            a_max: 10.0,
            curvature_max: 1.0,
            lateral_a_max: 10.0,
        };
        let (out, rep) = optimize(&t, &World::new(vec![]), &fp, &lim, &OptimizationWeights::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        for (a, b) in out.control_points.iter().zip(&t.control_points) {
            assert!((*a - *b).norm() < 1e-9);
        }
    }
}
