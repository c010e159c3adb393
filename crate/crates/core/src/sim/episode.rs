use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{AgentKind, AgentSpec, Scenario, Trigger};
use super::{step, Command, SimError, VehicleState};
use crate::geometry::{
    footprint_polygon, polygon_clearance, polygons_overlap, Footprint, Polygon, Pose2D, ReferencePath, Vec2,
};
use crate::iahrl::{
    imagine_ego_behaviors, nominal_index, predict_surrounding, ActMode, AttentionPolicy, BehaviorSample, EgoState,
    IahrlError, ImaginedBehavior, LatticeConfig, PlannerState, SeedVector, SurroundingObservation,
};
use crate::intention::Intention;
use crate::occlusion::{
    compute_occluded_regions, derive_velocity_constraints, ConstraintConfig, OccludedRegion, OcclusionHypothesis,
    Sensor,
};
use crate::spline::{optimize, OptimizationWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackMode {
    /// Sense, plan and track.
    Planned,
    /// Zero commands throughout.
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub mode: StackMode,
    pub dt: f64,
    pub replan_period: f64,
    pub sensor: Sensor,
    /// Cap the speed for agents that may hide in occluded regions.
    pub occlusion_constraints: bool,
    pub hypothesis: OcclusionHypothesis,
    /// Lateral distance from the route centerline to keep from a hidden agent.
    pub constraint_clearance: f64,
    pub constraint_decel: f64,
    pub station_step: f64,
    pub lattice: LatticeConfig,
    /// Drop candidates that come within `safety_margin` of a predicted agent.
    pub dynamic_mask: bool,
    pub safety_margin: f64,
    /// Predict the ramp aircraft from its classified intention.
    pub use_intention: bool,
    /// Pure-pursuit lookahead in meters.
    pub lookahead: f64,
    /// Within this distance of the goal the ego steers along the route.
    pub final_approach: f64,
    pub speed_gain: f64,
    pub brake_decel: f64,
    pub goal_decel: f64,
    pub steering_rate_max: f64,
    /// Replace the route by an optimized spline before driving.
    pub smooth_route: bool,
    pub record_trace: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            mode: StackMode::Planned,
            dt: 0.05,
            replan_period: 1.0,
            sensor: Sensor {
                range: 40.0,
                fov: TAU,
                resolution: 0.5_f64.to_radians(),
            },
            occlusion_constraints: true,
            hypothesis: OcclusionHypothesis {
                max_speed: 3.0,
                agent_radius: 0.5,
            },
            constraint_clearance: 1.5,
            constraint_decel: 3.0,
            station_step: 0.5,
            lattice: LatticeConfig::default(),
            dynamic_mask: true,
            safety_margin: 0.5,
            use_intention: true,
            lookahead: 5.0,
            final_approach: 10.0,
            speed_gain: 2.0,
            brake_decel: 5.0,
            goal_decel: 1.5,
            steering_rate_max: 2.0,
            smooth_route: false,
            record_trace: false,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            self.dt,
            self.replan_period,
            self.constraint_decel,
            self.station_step,
            self.lookahead,
            self.speed_gain,
            self.brake_decel,
            self.goal_decel,
            self.steering_rate_max,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(SimError::InvalidConfig(
                "timing, gains and decelerations must be positive",
            ));
        }
        if !(self.safety_margin >= 0.0) || !(self.constraint_clearance >= 0.0) || !(self.final_approach >= 0.0) {
            return Err(SimError::InvalidConfig("margins must be >= 0"));
        }
        self.sensor.validate()?;
        self.hypothesis.validate()?;
        self.lattice.validate()?;
        Ok(())
    }
}

/// What a behavior chooser sees at a decision point.
pub struct Decision<'a> {
    pub time: f64,
    pub candidates: &'a [ImaginedBehavior],
    pub mask: &'a [bool],
    pub state: &'a PlannerState,
}

pub trait BehaviorChooser {
    fn choose(&mut self, d: &Decision) -> Result<usize, IahrlError>;
}

/// Lowest rule cost among the allowed candidates.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleChooser;

impl BehaviorChooser for RuleChooser {
    fn choose(&mut self, d: &Decision) -> Result<usize, IahrlError> {
        let mut best: Option<usize> = None;
        for (i, c) in d.candidates.iter().enumerate() {
            if d.mask[i] && best.is_none_or(|b| c.rule_cost < d.candidates[b].rule_cost) {
                best = Some(i);
            }
        }
        best.ok_or(IahrlError::NoFeasibleBehavior)
    }
}

/// One policy decision, with what is needed to recompute its gradient.
#[derive(Debug, Clone)]
pub struct RecordedDecision {
    pub state: PlannerState,
    pub mask: Vec<bool>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    /// Rule cost of the choice over the largest allowed rule cost.
    pub normalized_cost: f64,
}

pub struct PolicyChooser<'p> {
    pub policy: &'p AttentionPolicy,
    pub seed: SeedVector,
    pub mode: ActMode,
    pub rng: ChaCha8Rng,
    pub record: bool,
    pub decisions: Vec<RecordedDecision>,
}

impl<'p> PolicyChooser<'p> {
    /// Seed vector and sampling stream both derived from `seed`.
    pub fn new(policy: &'p AttentionPolicy, mode: ActMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = SeedVector::draw(policy.config.d_seed, &mut rng);
        Self {
            policy,
            seed: eta,
            mode,
            rng,
            record: false,
            decisions: Vec::new(),
        }
    }
}

impl BehaviorChooser for PolicyChooser<'_> {
    fn choose(&mut self, d: &Decision) -> Result<usize, IahrlError> {
        let a = self.policy.act(d.state, &self.seed, d.mask, self.mode, &mut self.rng)?;
        if self.record {
            let max_cost = d
                .candidates
                .iter()
                .zip(d.mask)
                .filter(|(_, &m)| m)
                .map(|(c, _)| c.rule_cost)
                .fold(0.0, f64::max);
            let normalized_cost = if max_cost > 0.0 {
                d.candidates[a.index].rule_cost / max_cost
            } else {
                0.0
            };
            self.decisions.push(RecordedDecision {
                state: d.state.clone(),
                mask: d.mask.to_vec(),
                action: a.index,
                log_prob: a.log_prob,
                value: a.value,
                normalized_cost,
            });
        }
        Ok(a.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EpisodeOutcome {
    Success,
    Collision,
    Timeout,
    PlannerError,
}

impl EpisodeOutcome {
    pub fn name(self) -> &'static str {
        match self {
            Self::Success => "SUCCESS",
            Self::Collision => "COLLISION",
            Self::Timeout => "TIMEOUT",
            Self::PlannerError => "PLANNER_ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// One line of the episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steering: f64,
    pub accel: f64,
    pub behavior: Option<usize>,
    pub emergency: bool,
    pub agents: Vec<AgentTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub outcome: EpisodeOutcome,
    pub steps: usize,
    pub discomfort: f64,
    /// Smallest signed distance from the ego to any obstacle or agent.
    pub min_clearance: f64,
    pub decisions: usize,
    pub diagnostics: Option<String>,
    pub trace: Vec<TraceRecord>,
}

struct Agent<'a> {
    spec: &'a AgentSpec,
    s: f64,
    speed: f64,
    triggered: bool,
    pose: Pose2D,
}

impl Agent<'_> {
    fn polygon(&self) -> Polygon {
        footprint_polygon(&self.pose, &self.spec.footprint)
    }
}

fn place(path: &ReferencePath, s: f64) -> Pose2D {
    let (p, h) = path.point_at(s);
    Pose2D::from_position(p, h)
}

/// Gap kept to the agent ahead on the same lane.
const FOLLOW_GAP: f64 = 2.0;
const FOLLOW_HEADWAY: f64 = 1.0;

fn step_agents(agents: &mut [Agent], ego: &Polygon, ego_pos: Vec2, t: f64, dt: f64) {
    for a in agents.iter_mut() {
        if !a.triggered {
            a.triggered = match a.spec.trigger {
                Trigger::Immediate => true,
                Trigger::AtTime { time } => t >= time,
                Trigger::EgoWithin { point, distance } => ego_pos.distance(point) <= distance,
            };
        }
    }
    let snapshot: Vec<(f64, f64, usize)> = agents.iter().enumerate().map(|(i, a)| (a.s, a.speed, i)).collect();
    for i in 0..agents.len() {
        let a = &agents[i];
        let mut v = if a.triggered { a.spec.speed } else { 0.0 };
        if a.spec.kind == AgentKind::LaneFollow {
            for &(s_other, v_other, j) in &snapshot {
                if j == i || agents[j].spec.path != a.spec.path || s_other <= a.s {
                    continue;
                }
                let gap = s_other - a.s - a.spec.footprint.front_extent() - agents[j].spec.footprint.rear_extent();
                if gap < FOLLOW_GAP + FOLLOW_HEADWAY * v {
                    v = if gap < FOLLOW_GAP { 0.0 } else { v.min(v_other) };
                }
            }
        }
        let s_next = (a.s + v * dt).min(a.spec.path.length());
        let pose = place(&a.spec.path, s_next);
        let a = &mut agents[i];
        if s_next > a.s && polygons_overlap(&footprint_polygon(&pose, &a.spec.footprint), ego) {
            // agents give way rather than drive into the ego
            a.speed = 0.0;
            continue;
        }
        a.speed = (s_next - a.s) / dt;
        a.s = s_next;
        a.pose = pose;
    }
}

/// Portion of `route` between stations `s0 < s1`.
fn sub_path(route: &ReferencePath, s0: f64, s1: f64) -> Option<ReferencePath> {
    let mut pts = vec![route.point_at(s0).0];
    for (w, &st) in route.waypoints().iter().zip(route.stations()) {
        if st > s0 + 1e-6 && st < s1 - 1e-6 {
            pts.push(*w);
        }
    }
    pts.push(route.point_at(s1).0);
    ReferencePath::new(pts).ok()
}

/// Polyline through the chosen behavior, extended along the route at its
/// terminal offset so the lookahead point always exists.
fn tracking_path(start: Vec2, b: &ImaginedBehavior, route: &ReferencePath, lookahead: f64) -> Option<ReferencePath> {
    let mut pts = vec![start];
    let push = |p: Vec2, pts: &mut Vec<Vec2>| {
        if pts.last().is_none_or(|l: &Vec2| l.distance(p) > 0.05) {
            pts.push(p);
        }
    };
    for s in &b.samples {
        push(s.pose.position(), &mut pts);
    }
    let end = b.samples.last().map_or(start, |s| s.pose.position());
    let (s_end, _) = route.nearest(end);
    for k in 1..=3 {
        let s = s_end + k as f64 * lookahead;
        let (p, h) = route.point_at(s.min(route.length()));
        let beyond = (s - route.length()).max(0.0);
        let q = p + Vec2::from_angle(h) * beyond + Vec2::from_angle(h).perp() * b.terminal_lateral_offset;
        push(q, &mut pts);
    }
    if pts.len() < 2 {
        return None;
    }
    ReferencePath::new(pts).ok()
}

/// Speed of `b` at `tau` seconds after planning, starting from `v0`.
fn behavior_speed(b: &ImaginedBehavior, v0: f64, tau: f64) -> f64 {
    let mut prev = BehaviorSample {
        t: 0.0,
        pose: b.samples.first().map(|s| s.pose).unwrap_or(Pose2D::new(0.0, 0.0, 0.0)),
        speed: v0,
    };
    for s in &b.samples {
        if tau <= s.t {
            let w = (tau - prev.t) / (s.t - prev.t);
            return prev.speed + (s.speed - prev.speed) * w.clamp(0.0, 1.0);
        }
        prev = *s;
    }
    b.terminal_speed
}

/// Constant-speed extrapolation of a visible agent, along its lane when it
/// has one.
struct Prediction<'a> {
    pose: Pose2D,
    speed: f64,
    lane: Option<(&'a ReferencePath, f64)>,
    footprint: Footprint,
    /// Signed clearance to the ego when the prediction was made.
    clearance_now: f64,
}

impl Prediction<'_> {
    fn pose_at(&self, r: f64) -> Pose2D {
        match self.lane {
            Some((path, s0)) => place(path, s0 + self.speed * r),
            None => Pose2D::from_position(
                self.pose.position() + self.pose.direction() * (self.speed * r),
                self.pose.heading(),
            ),
        }
    }

    fn behavior(&self, lattice: &LatticeConfig) -> ImaginedBehavior {
        let obs = SurroundingObservation {
            pose: self.pose,
            speed: self.speed,
            lane: self.lane.map(|(p, _)| p),
        };
        predict_surrounding(&[obs], lattice.horizon, lattice.dt).remove(0)
    }
}

fn predict<'a>(a: &Agent<'a>, intention: Option<(u32, Intention, f64)>, ego_poly: &Polygon) -> Prediction<'a> {
    let mut speed = a.speed;
    let mut lane = (a.spec.kind == AgentKind::LaneFollow).then_some((&a.spec.path, a.s));
    if let Some((id, k, taxi_speed)) = intention {
        if id == a.spec.id {
            speed = if k == Intention::Proceed { taxi_speed } else { 0.0 };
            lane = Some((&a.spec.path, a.s));
        }
    }
    Prediction {
        pose: a.pose,
        speed,
        lane,
        footprint: a.spec.footprint,
        clearance_now: polygon_clearance(ego_poly, &a.polygon()).signed_distance(),
    }
}

/// Whether the ego following `samples` (relative times `t − shift`) gets
/// closer to a predicted agent than both `margin` and their current gap.
fn conflicts(samples: &[BehaviorSample], shift: f64, ego_fp: &Footprint, preds: &[Prediction], margin: f64) -> bool {
    const SUBSTEPS: usize = 4;
    let r_ego = ego_fp.circumradius();
    // Poses between samples are interpolated so fast crossings are not missed.
    let mut poses = Vec::with_capacity(samples.len() * SUBSTEPS);
    for w in samples.windows(2) {
        for j in 0..SUBSTEPS {
            let f = j as f64 / SUBSTEPS as f64;
            let t = w[0].t + f * (w[1].t - w[0].t);
            if t > shift {
                poses.push((t - shift, w[0].pose.interpolate(&w[1].pose, f)));
            }
        }
    }
    if let Some(last) = samples.last().filter(|s| s.t > shift) {
        poses.push((last.t - shift, last.pose));
    }
    preds.iter().any(|p| {
        let limit = margin.min(p.clearance_now);
        let r = p.footprint.circumradius();
        poses.iter().any(|&(rt, e)| {
            let a = p.pose_at(rt);
            let ce = e.transform(Vec2::new(ego_fp.rear_axle_offset, 0.0));
            let ca = a.transform(Vec2::new(p.footprint.rear_axle_offset, 0.0));
            ce.distance(ca) - r_ego - r < limit
                && polygon_clearance(&footprint_polygon(&e, ego_fp), &footprint_polygon(&a, &p.footprint))
                    .signed_distance()
                    < limit - 1e-9
        })
    })
}

fn is_visible(p: Vec2, ego: Vec2, sensor: &Sensor, regions: &[OccludedRegion]) -> bool {
    p.distance(ego) <= sensor.range && !regions.iter().any(|r| r.polygon.contains(p))
}

/// Smoothed route: optimized spline from start to goal, then straight on.
fn smooth_route(sc: &Scenario) -> Result<ReferencePath, SimError> {
    let (s0, _) = sc.ego.route.nearest(sc.ego.start.position());
    let (s1, _) = sc.ego.route.nearest(sc.ego.goal);
    let len = (s1 - s0).max(1.0);
    let n_ctrl = (len.round() as usize + 1).max(6);
    let duration = len / (2.0 / 3.0 * sc.ego.limits.v_max);
    let (init, world) = sc.spline_problem(n_ctrl, duration)?;
    let limits = crate::spline::KinodynamicLimits {
        v_max: sc.ego.limits.v_max,
        a_max: sc.ego.limits.a_max,
        curvature_max: sc.ego.limits.curvature_max,
        lateral_a_max: sc.ego.limits.lateral_a_max,
    };
    let (traj, _) = optimize(
        &init,
        &world,
        &sc.ego.footprint,
        &limits,
        &OptimizationWeights::default(),
    )?;
    let mut pts: Vec<Vec2> = Vec::new();
    for u in crate::spline::BSplineTrajectory::sample_params(4 * n_ctrl) {
        let p = traj.position(u);
        if pts.last().is_none_or(|l| l.distance(p) > 1e-3) {
            pts.push(p);
        }
    }
    let end = *pts.last().unwrap_or(&sc.ego.goal);
    let h = sc.ego.route.point_at(s1).1;
    pts.push(end + Vec2::from_angle(h) * 10.0);
    Ok(ReferencePath::new(pts)?)
}

/// Runs one episode. Randomness in the chooser comes from its own seed; the
/// simulation itself is deterministic given the scenario.
pub fn run_episode(
    sc: &Scenario,
    cfg: &StackConfig,
    chooser: &mut dyn BehaviorChooser,
) -> Result<EpisodeResult, SimError> {
    sc.validate()?;
    cfg.validate()?;
    let planner_error = |msg: String, steps: usize| EpisodeResult {
        outcome: EpisodeOutcome::PlannerError,
        steps,
        discomfort: 0.0,
        min_clearance: f64::INFINITY,
        decisions: 0,
        diagnostics: Some(msg),
        trace: vec![],
    };
    let route = if cfg.smooth_route && cfg.mode == StackMode::Planned {
        match smooth_route(sc) {
            Ok(r) => r,
            Err(e) => return Ok(planner_error(format!("route smoothing failed: {e}"), 0)),
        }
    } else {
        sc.ego.route.clone()
    };
    let e = &sc.ego;
    let fp = e.footprint;
    let limits = e.limits;
    let (s_goal, _) = route.nearest(e.goal);
    let mut ego = VehicleState {
        pose: e.start,
        speed: e.start_speed,
        steering: 0.0,
        wheelbase: e.wheelbase,
    };
    let mut agents: Vec<Agent> = sc
        .agents
        .iter()
        .map(|spec| Agent {
            spec,
            s: spec.start_s,
            speed: 0.0,
            triggered: false,
            pose: place(&spec.path, spec.start_s),
        })
        .collect();
    let aircraft_intention = match (&sc.ramp, cfg.use_intention) {
        (Some(r), true) => Some((
            r.aircraft_id,
            r.model
                .classify(&r.aircraft_evidence, &r.surrounding_evidence)
                .map_err(|e| SimError::InvalidScenario(e.to_string()))?,
            r.taxi_speed,
        )),
        _ => None,
    };
    let n_steps = (sc.duration / cfg.dt).ceil() as usize;
    let k_candidates = cfg.lattice.candidate_count(limits.v_max);

    let mut plan: Option<(ImaginedBehavior, ReferencePath, f64, f64, usize)> = None;
    let mut emergency = false;
    let mut next_plan = 0.0;
    let mut visible_prev: Option<BTreeSet<u32>> = None;
    let mut last_accel: f64 = 0.0;
    let mut discomfort = 0.0;
    let mut min_clearance = f64::INFINITY;
    let mut decisions = 0;
    let mut trace = Vec::new();
    let ego_reach = fp.circumradius();

    for k in 0..n_steps {
        let t = k as f64 * cfg.dt;
        let mut cmd = Command::default();
        if cfg.mode == StackMode::Planned {
            // sense
            let regions = if sc.obstacles.is_empty() {
                Vec::new()
            } else {
                compute_occluded_regions(&ego.pose, &cfg.sensor, &sc.obstacles)?
            };
            let visible: BTreeSet<u32> = agents
                .iter()
                .filter(|a| is_visible(a.pose.position(), ego.pose.position(), &cfg.sensor, &regions))
                .map(|a| a.spec.id)
                .collect();
            let (s_ego, _) = route.nearest(ego.pose.position());
            let s_front = s_ego + fp.front_extent();
            let v_occ = if cfg.occlusion_constraints && !regions.is_empty() {
                occlusion_speed(&regions, &sc.obstacles, cfg, &route, s_front, limits.v_max)?
            } else {
                f64::INFINITY
            };

            // plan
            let ego_poly = footprint_polygon(&ego.pose, &fp);
            let preds: Vec<Prediction> = agents
                .iter()
                .filter(|a| visible.contains(&a.spec.id))
                .map(|a| predict(a, aircraft_intention, &ego_poly))
                .collect();
            let plan_broken = cfg.dynamic_mask
                && !emergency
                && plan
                    .as_ref()
                    .is_some_and(|(b, _, t0, ..)| conflicts(&b.samples, t - t0, &fp, &preds, cfg.safety_margin));
            if t >= next_plan - 1e-9 || visible_prev.as_ref() != Some(&visible) || emergency || plan_broken {
                next_plan = t + cfg.replan_period;
                let state = EgoState {
                    pose: ego.pose,
                    speed: ego.speed,
                    accel: last_accel.clamp(-limits.a_max, limits.a_max),
                };
                match imagine_ego_behaviors(&state, &route, &limits, &cfg.lattice, &fp, &sc.obstacles) {
                    Ok(cands) => {
                        let mask: Vec<bool> = cands
                            .iter()
                            .map(|c| {
                                c.feasible
                                    && !(cfg.dynamic_mask && conflicts(&c.samples, 0.0, &fp, &preds, cfg.safety_margin))
                            })
                            .collect();
                        if mask.iter().any(|&m| m) {
                            let ps = PlannerState {
                                ego_behavior: cands[nominal_index(&cfg.lattice, limits.v_max, ego.speed)].clone(),
                                surrounding: preds.iter().map(|p| p.behavior(&cfg.lattice)).collect(),
                            };
                            let d = Decision {
                                time: t,
                                candidates: &cands,
                                mask: &mask,
                                state: &ps,
                            };
                            let idx = match chooser.choose(&d) {
                                Ok(i) if i < k_candidates && mask[i] => i,
                                Ok(i) => {
                                    return Ok(planner_error(format!("chooser picked disallowed candidate {i}"), k))
                                }
                                Err(err) => return Ok(planner_error(format!("chooser failed: {err}"), k)),
                            };
                            decisions += 1;
                            let b = cands[idx].clone();
                            match tracking_path(ego.pose.position(), &b, &route, cfg.lookahead) {
                                Some(path) => {
                                    plan = Some((b, path, t, ego.speed, idx));
                                    emergency = false;
                                }
                                None => emergency = true,
                            }
                        } else {
                            emergency = true;
                        }
                    }
                    Err(IahrlError::NoFeasibleBehavior) => emergency = true,
                    Err(err) => return Ok(planner_error(format!("lattice failed: {err}"), k)),
                }
            }
            visible_prev = Some(visible);

            // track
            let v_goal = (2.0 * cfg.goal_decel * (s_goal - s_ego - GOAL_STANDOFF).max(0.0)).sqrt();
            let (mut target, mut feedforward) = match (&plan, emergency) {
                (Some((b, _, t0, v0, _)), false) => {
                    let tau = t - t0 + cfg.dt;
                    let v = behavior_speed(b, *v0, tau);
                    (v, (behavior_speed(b, *v0, tau + cfg.dt) - v) / cfg.dt)
                }
                _ => (0.0, 0.0),
            };
            for cap in [v_occ, v_goal, limits.v_max] {
                if cap < target {
                    (target, feedforward) = (cap, 0.0);
                }
            }
            let accel = (feedforward + cfg.speed_gain * (target - ego.speed)).clamp(-cfg.brake_decel, limits.a_max);
            let delta = match &plan {
                _ if s_goal - s_ego < cfg.final_approach => pure_pursuit(&ego, &route, cfg.lookahead),
                Some((_, path, ..)) => pure_pursuit(&ego, path, cfg.lookahead),
                None => 0.0,
            }
            .clamp(-e.max_steering, e.max_steering);
            cmd = Command {
                accel,
                steering_rate: ((delta - ego.steering) / cfg.dt).clamp(-cfg.steering_rate_max, cfg.steering_rate_max),
            };
        }

        let prev_speed = ego.speed;
        ego = step(&ego, cmd, cfg.dt, e.max_steering);
        let accel = (ego.speed - prev_speed) / cfg.dt;
        let lat = ego.speed * ego.speed * ego.steering.tan() / ego.wheelbase;
        discomfort += ((accel - last_accel).abs() / cfg.dt + lat.abs()) * cfg.dt;
        last_accel = accel;

        let ego_poly = footprint_polygon(&ego.pose, &fp);
        step_agents(&mut agents, &ego_poly, ego.pose.position(), t + cfg.dt, cfg.dt);

        let mut collided = false;
        let centre = ego.pose.transform(Vec2::new(fp.rear_axle_offset, 0.0));
        for poly in sc.obstacles.iter().cloned().chain(agents.iter().map(|a| a.polygon())) {
            if polygons_overlap(&ego_poly, &poly) {
                collided = true;
                min_clearance = min_clearance.min(polygon_clearance(&ego_poly, &poly).signed_distance());
                continue;
            }
            // skip shapes that cannot beat the current minimum
            let (lo, hi) = poly.bounds();
            let dx = (lo.x - centre.x).max(centre.x - hi.x).max(0.0);
            let dy = (lo.y - centre.y).max(centre.y - hi.y).max(0.0);
            if (dx * dx + dy * dy).sqrt() - ego_reach < min_clearance {
                min_clearance = min_clearance.min(polygon_clearance(&ego_poly, &poly).signed_distance());
            }
        }
        if cfg.record_trace {
            trace.push(TraceRecord {
                step: k + 1,
                t: t + cfg.dt,
                x: ego.pose.x,
                y: ego.pose.y,
                heading: ego.pose.heading(),
                speed: ego.speed,
                steering: ego.steering,
                accel,
                behavior: plan.as_ref().map(|p| p.4),
                emergency,
                agents: agents
                    .iter()
                    .map(|a| AgentTrace {
                        id: a.spec.id,
                        x: a.pose.x,
                        y: a.pose.y,
                        heading: a.pose.heading(),
                        speed: a.speed,
                    })
                    .collect(),
            });
        }
        let outcome = if collided {
            Some(EpisodeOutcome::Collision)
        } else if ego.pose.position().distance(e.goal) <= GOAL_RADIUS && ego.speed < GOAL_SPEED {
            Some(EpisodeOutcome::Success)
        } else {
            None
        };
        if let Some(outcome) = outcome {
            return Ok(EpisodeResult {
                outcome,
                steps: k + 1,
                discomfort,
                min_clearance,
                decisions,
                diagnostics: None,
                trace,
            });
        }
    }
    Ok(EpisodeResult {
        outcome: EpisodeOutcome::Timeout,
        steps: n_steps,
        discomfort,
        min_clearance,
        decisions,
        diagnostics: None,
        trace,
    })
}

const GOAL_RADIUS: f64 = 1.0;
const GOAL_SPEED: f64 = 0.5;
/// The goal speed cap reaches zero this far before the goal.
const GOAL_STANDOFF: f64 = 0.3;

/// Largest speed now from which braking meets every cap ahead.
fn occlusion_speed(
    regions: &[OccludedRegion],
    obstacles: &[Polygon],
    cfg: &StackConfig,
    route: &ReferencePath,
    s_front: f64,
    v_max: f64,
) -> Result<f64, SimError> {
    let reach = v_max * v_max / (2.0 * cfg.constraint_decel) + cfg.station_step;
    let s0 = s_front.min(route.length() - 1e-3).max(0.0);
    let s1 = (s_front + reach).min(route.length());
    let Some(sub) = sub_path(route, s0, s1) else {
        return Ok(f64::INFINITY);
    };
    // a hidden agent must fit where it would emerge
    let r = cfg.hypothesis.agent_radius;
    let fits = |p: Vec2| {
        obstacles.iter().all(|o| {
            let (lo, hi) = o.bounds();
            p.x < lo.x - r || p.x > hi.x + r || p.y < lo.y - r || p.y > hi.y + r || o.distance_to_point(p) >= r
        })
    };
    let regions: Vec<OccludedRegion> = regions
        .iter()
        .filter_map(|reg| {
            let frontier: Vec<Vec2> = reg.frontier.iter().copied().filter(|&p| fits(p)).collect();
            (!frontier.is_empty()).then(|| OccludedRegion {
                frontier,
                ..reg.clone()
            })
        })
        .collect();
    let cc = ConstraintConfig {
        ego_decel: cfg.constraint_decel,
        clearance: cfg.constraint_clearance,
        nominal_vmax: v_max,
        station_step: cfg.station_step,
    };
    let profile = derive_velocity_constraints(&regions, &cfg.hypothesis, &sub, &cc)?;
    Ok(profile
        .stations
        .iter()
        .zip(&profile.v_max)
        .map(|(s, v)| (v * v + 2.0 * cfg.constraint_decel * s).sqrt())
        .fold(f64::INFINITY, f64::min))
}

/// Steering angle toward the point `lookahead` ahead along `path`.
fn pure_pursuit(ego: &VehicleState, path: &ReferencePath, lookahead: f64) -> f64 {
    let (s, _) = path.nearest(ego.pose.position());
    let (target, _) = path.point_at((s + lookahead).min(path.length()));
    let local = ego.pose.inverse_transform(target);
    let ld = local.norm();
    if ld < 1e-6 {
        return 0.0;
    }
    let alpha = local.y.atan2(local.x);
    (2.0 * ego.wheelbase * alpha.sin() / ld).atan()
}
