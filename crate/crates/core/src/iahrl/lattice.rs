use serde::{Deserialize, Serialize};

use super::IahrlError;
use crate::geometry::{footprint_polygon, polygons_overlap, Footprint, Polygon, Pose2D, ReferencePath};

/// Polynomial in `t` with coefficients in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    pub coeffs: Vec<f64>,
}

impl Poly {
    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn derivative(&self) -> Poly {
        Poly {
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, c)| c * i as f64)
                .collect(),
        }
    }

    /// `∫₀ᵀ p(t)² dt`, exactly.
    pub fn integral_of_square(&self, t_end: f64) -> f64 {
        let n = self.coeffs.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let k = (i + j + 1) as i32;
                total += self.coeffs[i] * self.coeffs[j] * t_end.powi(k) / k as f64;
            }
        }
        total
    }
}

/// Quintic with `p(0), p'(0), p''(0)` given and `p(T) = target`,
/// `p'(T) = p''(T) = 0`.
pub fn quintic_to_rest(p0: f64, v0: f64, a0: f64, target: f64, t: f64) -> Poly {
    let c2 = 0.5 * a0;
    let (t2, t3) = (t * t, t * t * t);
    let (t4, t5) = (t3 * t, t3 * t2);
    let rhs = [target - (p0 + v0 * t + c2 * t2), -(v0 + 2.0 * c2 * t), -2.0 * c2];
    let m = [
        [t3, t4, t5],
        [3.0 * t2, 4.0 * t3, 5.0 * t4],
        [6.0 * t, 12.0 * t2, 20.0 * t3],
    ];
    let [c3, c4, c5] = solve3(m, rhs);
    Poly {
        coeffs: vec![p0, v0, c2, c3, c4, c5],
    }
}

/// Quartic with `p(0), p'(0), p''(0)` given, `p'(T) = v_end` and `p''(T) = 0`.
pub fn quartic_to_speed(p0: f64, v0: f64, a0: f64, v_end: f64, t: f64) -> Poly {
    let c2 = 0.5 * a0;
    let (t2, t3) = (t * t, t * t * t);
    // [3T² 4T³; 6T 12T²] [c3 c4]ᵀ = [v_end − v0 − a0 T, −a0]
    let r0 = v_end - v0 - a0 * t;
    let r1 = -a0;
    let det = 3.0 * t2 * 12.0 * t2 - 4.0 * t3 * 6.0 * t;
    let c3 = (r0 * 12.0 * t2 - 4.0 * t3 * r1) / det;
    let c4 = (3.0 * t2 * r1 - 6.0 * t * r0) / det;
    Poly {
        coeffs: vec![p0, v0, c2, c3, c4],
    }
}

/// Cramer's rule; the boundary systems here are well conditioned for T ≥ 1 s.
fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> [f64; 3] {
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    std::array::from_fn(|c| {
        let mut a = m;
        for row in 0..3 {
            a[row][c] = r[row];
        }
        det(a) / d
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSample {
    pub t: f64,
    pub pose: Pose2D,
    pub speed: f64,
}

/// Candidate trajectory over the planning horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImaginedBehavior {
    pub samples: Vec<BehaviorSample>,
    pub terminal_lateral_offset: f64,
    pub terminal_speed: f64,
    pub rule_cost: f64,
    pub feasible: bool,
}

/// Ego behavior first, then the surrounding vehicles in the given order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerState {
    pub ego_behavior: ImaginedBehavior,
    pub surrounding: Vec<ImaginedBehavior>,
}

impl PlannerState {
    pub fn behaviors(&self) -> impl Iterator<Item = &ImaginedBehavior> {
        std::iter::once(&self.ego_behavior).chain(&self.surrounding)
    }

    pub fn validate(&self) -> Result<(), IahrlError> {
        let h = self.ego_behavior.samples.len();
        if self.surrounding.iter().any(|b| b.samples.len() != h) {
            return Err(IahrlError::InconsistentHorizon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub jerk: f64,
    pub time: f64,
    pub offset: f64,
    /// Squared shortfall of the terminal speed below the desired speed.
    pub speed: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            jerk: 0.1,
            time: 1.0,
            offset: 1.0,
            speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeConfig {
    pub offsets: Vec<f64>,
    pub speed_step: f64,
    pub horizon: usize,
    pub dt: f64,
    pub weights: CostWeights,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            offsets: (-3..=3).map(f64::from).collect(),
            speed_step: 2.0,
            horizon: 30,
            dt: 0.2,
            weights: CostWeights::default(),
        }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<(), IahrlError> {
        if self.offsets.is_empty() || self.offsets.iter().any(|o| !o.is_finite()) {
            return Err(IahrlError::InvalidConfig("offsets must be finite and non-empty"));
        }
        if !(self.speed_step > 0.0) || !(self.dt > 0.0) || self.horizon < 10 {
            return Err(IahrlError::InvalidConfig(
                "speed_step and dt must be positive, horizon at least 10",
            ));
        }
        Ok(())
    }

    /// Terminal speeds `0, step, 2·step, …` up to `v_max`.
    pub fn speeds(&self, v_max: f64) -> Vec<f64> {
        let n = (v_max / self.speed_step + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.speed_step).collect()
    }

    pub fn candidate_count(&self, v_max: f64) -> usize {
        self.offsets.len() * self.speeds(v_max).len()
    }

    pub fn duration(&self) -> f64 {
        self.horizon as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoLimits {
    pub v_max: f64,
    pub a_max: f64,
    pub curvature_max: f64,
    pub lateral_a_max: f64,
}

/// Ego kinematic state used to seed the lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub pose: Pose2D,
    pub speed: f64,
    pub accel: f64,
}

/// Below this speed curvature is not checked; the heading is held instead.
const CREEP_SPEED: f64 = 0.1;

/// Lattice of lateral quintics and longitudinal quartics in the Frenet frame
/// of `path`. Candidate `i·S + j` has offset `offsets[i]` and terminal speed
/// `speeds[j]`. Infeasible candidates are kept and flagged.
pub fn imagine_ego_behaviors(
    ego: &EgoState,
    path: &ReferencePath,
    limits: &EgoLimits,
    cfg: &LatticeConfig,
    footprint: &Footprint,
    obstacles: &[Polygon],
) -> Result<Vec<ImaginedBehavior>, IahrlError> {
    cfg.validate()?;
    let (s0, d0) = path.cartesian_to_frenet(&ego.pose)?;
    let (_, path_heading) = path.point_at(s0);
    let rel = ego.pose.heading() - path_heading;
    let (sd0, dd0) = (ego.speed * rel.cos(), ego.speed * rel.sin());
    let t_end = cfg.duration();
    let speeds = cfg.speeds(limits.v_max);
    let mut out = Vec::with_capacity(cfg.offsets.len() * speeds.len());
    for &offset in &cfg.offsets {
        let lat = quintic_to_rest(d0, dd0, 0.0, offset, t_end);
        let (lat1, lat2) = (lat.derivative(), lat.derivative().derivative());
        let lat_jerk = lat2.derivative().integral_of_square(t_end);
        for &v_end in &speeds {
            let lon = quartic_to_speed(s0, sd0, ego.accel, v_end, t_end);
            let (lon1, lon2) = (lon.derivative(), lon.derivative().derivative());
            let lon_jerk = lon2.derivative().integral_of_square(t_end);
            let w = &cfg.weights;
            let rule_cost = w.jerk * (lat_jerk + lon_jerk)
                + w.time * t_end
                + w.offset * offset * offset
                + w.speed * (limits.v_max - v_end).powi(2);
            let mut feasible = true;
            let mut samples = Vec::with_capacity(cfg.horizon);
            let mut heading = ego.pose.heading();
            for k in 1..=cfg.horizon {
                let t = k as f64 * cfg.dt;
                let (s, d) = (lon.eval(t), lat.eval(t));
                let (sd, dd) = (lon1.eval(t), lat1.eval(t));
                let (sdd, ddd) = (lon2.eval(t), lat2.eval(t));
                let speed = (sd * sd + dd * dd).sqrt();
                if sd < -1e-6 || speed > limits.v_max + 1e-9 || sdd.abs() > limits.a_max + 1e-9 {
                    feasible = false;
                }
                let (base, tangent) = path.point_at(s.clamp(0.0, path.length()));
                if speed > CREEP_SPEED {
                    heading = tangent + dd.atan2(sd);
                    let kappa = (sd * ddd - dd * sdd).abs() / speed.powi(3);
                    if kappa > limits.curvature_max || speed * speed * kappa > limits.lateral_a_max {
                        feasible = false;
                    }
                }
                let normal = crate::geometry::Vec2::from_angle(tangent).perp();
                let pose = Pose2D::from_position(base + normal * d, heading);
                if feasible && !obstacles.is_empty() {
                    let poly = footprint_polygon(&pose, footprint);
                    if obstacles.iter().any(|o| polygons_overlap(&poly, o)) {
                        feasible = false;
                    }
                }
                samples.push(BehaviorSample { t, pose, speed });
            }
            out.push(ImaginedBehavior {
                samples,
                terminal_lateral_offset: offset,
                terminal_speed: v_end,
                rule_cost,
                feasible,
            });
        }
    }
    if !out.iter().any(|b| b.feasible) {
        return Err(IahrlError::NoFeasibleBehavior);
    }
    Ok(out)
}

/// Observed surrounding vehicle; `lane` is the path it follows, if known.
#[derive(Debug, Clone, Copy)]
pub struct SurroundingObservation<'a> {
    pub pose: Pose2D,
    pub speed: f64,
    pub lane: Option<&'a ReferencePath>,
}

/// Constant-speed rollouts, along the lane centerline when there is one and
/// straight ahead otherwise.
pub fn predict_surrounding(obs: &[SurroundingObservation], horizon: usize, dt: f64) -> Vec<ImaginedBehavior> {
    obs.iter()
        .map(|o| {
            let start = o.lane.map(|l| l.nearest(o.pose.position()).0);
            let samples = (1..=horizon)
                .map(|k| {
                    let t = k as f64 * dt;
                    let pose = match (o.lane, start) {
                        (Some(lane), Some(s0)) => {
                            let (p, h) = lane.point_at(s0 + o.speed * t);
                            Pose2D::from_position(p, h)
                        }
                        _ => Pose2D::from_position(
                            o.pose.position() + o.pose.direction() * (o.speed * t),
                            o.pose.heading(),
                        ),
                    };
                    BehaviorSample {
                        t,
                        pose,
                        speed: o.speed,
                    }
                })
                .collect();
            ImaginedBehavior {
                samples,
                terminal_lateral_offset: 0.0,
                terminal_speed: o.speed,
                rule_cost: 0.0,
                feasible: true,
            }
        })
        .collect()
}

/// The lane-keeping candidate whose terminal speed is closest to `speed`.
pub fn nominal_index(cfg: &LatticeConfig, v_max: f64, speed: f64) -> usize {
    let speeds = cfg.speeds(v_max);
    let oi = cfg
        .offsets
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let si = speeds
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - speed).abs().total_cmp(&(b.1 - speed).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    oi * speeds.len() + si
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;

    #[test]
    fn quintic_meets_boundary_conditions() {
        let p = quintic_to_rest(0.7, -0.4, 0.3, 2.0, 6.0);
        let (d1, d2) = (p.derivative(), p.derivative().derivative());
        assert!((p.eval(0.0) - 0.7).abs() < 1e-12);
        assert!((d1.eval(0.0) + 0.4).abs() < 1e-12);
        assert!((d2.eval(0.0) - 0.3).abs() < 1e-12);
        assert!((p.eval(6.0) - 2.0).abs() < 1e-9);
        assert!(d1.eval(6.0).abs() < 1e-9);
        assert!(d2.eval(6.0).abs() < 1e-9);
    }

    #[test]
    fn quartic_meets_boundary_conditions() {
        let p = quartic_to_speed(3.0, 5.0, -1.0, 2.0, 6.0);
        let (d1, d2) = (p.derivative(), p.derivative().derivative());
        assert!((d1.eval(6.0) - 2.0).abs() < 1e-9);
        assert!(d2.eval(6.0).abs() < 1e-9);
        assert!((d2.eval(0.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_integral_matches_quadrature() {
        let p = Poly {
            coeffs: vec![1.0, -2.0, 0.5],
        };
        let n = 100_000;
        let h = 3.0 / n as f64;
        let q: f64 = (0..n).map(|k| p.eval((k as f64 + 0.5) * h).powi(2) * h).sum();
        assert!((p.integral_of_square(3.0) - q).abs() < 1e-6);
    }

    fn limits() -> EgoLimits {
        EgoLimits {
            v_max: 10.0,
            a_max: 3.0,
            curvature_max: 0.3,
            lateral_a_max: 4.0,
        }
    }

    #[test]
    fn steady_lane_keeping_has_no_jerk() {
        let path = ReferencePath::straight(Vec2::new(0.0, 0.0), Vec2::new(200.0, 0.0)).unwrap();
        let ego = EgoState {
            pose: Pose2D::new(10.0, 0.0, 0.0),
            speed: 6.0,
            accel: 0.0,
        };
        let cfg = LatticeConfig::default();
        let fp = Footprint::new(4.0, 1.8, 0.0).unwrap();
        let c = imagine_ego_behaviors(&ego, &path, &limits(), &cfg, &fp, &[]).unwrap();
        assert_eq!(c.len(), 7 * 6);
        let b = &c[nominal_index(&cfg, 10.0, 6.0)];
        assert_eq!((b.terminal_lateral_offset, b.terminal_speed), (0.0, 6.0));
        let jerk_free = cfg.weights.time * 6.0 + cfg.weights.speed * 16.0;
        assert!((b.rule_cost - jerk_free).abs() < 1e-9);
        for s in &b.samples {
            assert!((s.pose.x - (10.0 + 6.0 * s.t)).abs() < 1e-9);
            assert!(s.pose.y.abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_motion_prediction() {
        let lane = ReferencePath::straight(Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)).unwrap();
        let obs = [SurroundingObservation {
            pose: Pose2D::new(5.0, 0.0, 0.0),
            speed: 5.0,
            lane: Some(&lane),
        }];
        let b = &predict_surrounding(&obs, 30, 0.2)[0];
        for w in b.samples.windows(2) {
            assert!((w[1].pose.position().distance(w[0].pose.position()) - 1.0).abs() < 1e-12);
        }
        let still = [SurroundingObservation {
            pose: Pose2D::new(5.0, 1.0, 0.3),
            speed: 0.0,
            lane: None,
        }];
        let b = &predict_surrounding(&still, 30, 0.2)[0];
        assert!(b.samples.iter().all(|s| s.pose == b.samples[0].pose));
    }
}
