use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::{footprint_polygon, polygons_overlap, Footprint, Polygon, Pose2D, ReferencePath, Vec2};
use crate::iahrl::EgoLimits;
use crate::intention::{AircraftEvidence, Intention, IntentionModel, SurroundingEvidence};
use crate::spline::{init_from_reference, BSplineTrajectory, World};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    Intersection,
    OccludedCorridor,
    NarrowPassage,
    AirfieldRamp,
    Custom,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Intersection => "INTERSECTION",
            Self::OccludedCorridor => "OCCLUDED_CORRIDOR",
            Self::NarrowPassage => "NARROW_PASSAGE",
            Self::AirfieldRamp => "AIRFIELD_RAMP",
            Self::Custom => "CUSTOM",
        })
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let quoted = format!("\"{}\"", s.trim().to_ascii_uppercase().replace('-', "_"));
        serde_json::from_str(&quoted).map_err(|_| format!("unknown scenario kind '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub start: Pose2D,
    #[serde(default)]
    pub start_speed: f64,
    pub goal: Vec2,
    pub route: ReferencePath,
    pub footprint: Footprint,
    pub wheelbase: f64,
    pub max_steering: f64,
    pub limits: EgoLimits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentKind {
    /// Runs its path regardless of other traffic.
    Scripted,
    /// Follows its lane and keeps a gap to agents ahead on the same lane.
    LaneFollow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Trigger {
    Immediate,
    AtTime {
        time: f64,
    },
    /// Fires once the ego reference point comes within `distance` of `point`.
    EgoWithin {
        point: Vec2,
        distance: f64,
    },
}

/// Agent moving along `path` at constant `speed` from station `start_s`
/// once its trigger fires. Agents halt rather than move into the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: u32,
    pub kind: AgentKind,
    pub footprint: Footprint,
    pub path: ReferencePath,
    #[serde(default)]
    pub start_s: f64,
    pub speed: f64,
    pub trigger: Trigger,
}

/// Aircraft intention evidence observed by the ego on a ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSpec {
    pub aircraft_id: u32,
    pub true_intention: Intention,
    pub aircraft_evidence: AircraftEvidence,
    pub surrounding_evidence: SurroundingEvidence,
    pub model: IntentionModel,
    pub taxi_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub kind: ScenarioKind,
    pub seed: u64,
    #[serde(default)]
    pub lanes: Vec<ReferencePath>,
    #[serde(default)]
    pub obstacles: Vec<Polygon>,
    pub ego: EgoSpec,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<RampSpec>,
}

/// How far the start and goal may sit from the route.
const ON_MAP_TOL: f64 = 5.0;

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive".into());
        }
        let e = &self.ego;
        e.footprint.validate()?;
        if !(e.wheelbase > 0.0) || !(e.max_steering > 0.0 && e.max_steering < 1.5) {
            return bad("wheelbase must be positive and max_steering in (0, 1.5)".into());
        }
        let l = &e.limits;
        if !(l.v_max > 0.0 && l.a_max > 0.0 && l.curvature_max > 0.0 && l.lateral_a_max > 0.0) {
            return bad("ego limits must be positive".into());
        }
        if !(e.start_speed >= 0.0 && e.start_speed <= l.v_max) {
            return bad("start_speed must lie in [0, v_max]".into());
        }
        if e.route.nearest(e.start.position()).1 > ON_MAP_TOL || e.route.nearest(e.goal).1 > ON_MAP_TOL {
            return bad("start and goal must lie on the route".into());
        }
        let start_poly = footprint_polygon(&e.start, &e.footprint);
        if self.obstacles.iter().any(|o| polygons_overlap(o, &start_poly)) {
            return bad("ego starts inside an obstacle".into());
        }
        if self.obstacles.iter().any(|o| o.contains(e.goal)) {
            return bad("goal lies inside an obstacle".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in &self.agents {
            a.footprint.validate()?;
            if !ids.insert(a.id) {
                return bad(format!("duplicate agent id {}", a.id));
            }
            if !(a.speed >= 0.0 && a.speed.is_finite()) || !(a.start_s >= 0.0 && a.start_s <= a.path.length()) {
                return bad(format!("agent {} has a bad speed or start station", a.id));
            }
        }
        if let Some(r) = &self.ramp {
            r.model
                .validate()
                .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            if !ids.contains(&r.aircraft_id) {
                return bad("ramp aircraft is not an agent".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn goal_pose(&self) -> Pose2D {
        let (s, _) = self.ego.route.nearest(self.ego.goal);
        Pose2D::from_position(self.ego.goal, self.ego.route.point_at(s).1)
    }

    /// Initial spline along the route from start to goal, plus the static world.
    pub fn spline_problem(&self, n_ctrl: usize, duration: f64) -> Result<(BSplineTrajectory, World), SimError> {
        let init = init_from_reference(&self.ego.route, &self.ego.start, &self.goal_pose(), n_ctrl, duration)?;
        Ok((init, World::new(self.obstacles.clone())))
    }
}

/// Generator parameters; fields irrelevant to a kind are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    /// INTERSECTION agent count; drawn from 2..=4 when absent.
    pub n_agents: Option<usize>,
    /// OCCLUDED_CORRIDOR darting speed; drawn from [1.5, 3] m/s when absent.
    pub darting_speed: Option<f64>,
    /// NARROW_PASSAGE corridor width over footprint width.
    pub width_factor: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            n_agents: None,
            darting_speed: None,
            width_factor: 1.2,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_agents.is_some_and(|n| n > 8) {
            return Err(SimError::InvalidParams("n_agents must be at most 8".into()));
        }
        if self.darting_speed.is_some_and(|v| !(v > 0.0 && v <= 10.0)) {
            return Err(SimError::InvalidParams("darting_speed must lie in (0, 10]".into()));
        }
        if !(1.0..=5.0).contains(&self.width_factor) {
            return Err(SimError::InvalidParams("width_factor must lie in [1, 5]".into()));
        }
        Ok(())
    }
}

pub fn generate_scenario(kind: ScenarioKind, params: &ScenarioParams, seed: u64) -> Result<Scenario, SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = match kind {
        ScenarioKind::Intersection => intersection(params, seed, &mut rng),
        ScenarioKind::OccludedCorridor => occluded_corridor(params, seed, &mut rng),
        ScenarioKind::NarrowPassage => narrow_passage(params, seed, &mut rng),
        ScenarioKind::AirfieldRamp => airfield_ramp(seed, &mut rng),
        ScenarioKind::Custom => return Err(SimError::InvalidParams("CUSTOM scenarios are written by hand".into())),
    }?;
    s.validate()?;
    Ok(s)
}

fn line(a: (f64, f64), b: (f64, f64)) -> Result<ReferencePath, SimError> {
    Ok(ReferencePath::straight(Vec2::new(a.0, a.1), Vec2::new(b.0, b.1))?)
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Polygon, SimError> {
    Ok(Polygon::aabb(Vec2::new(x0, y0), Vec2::new(x1, y1))?)
}

fn car_footprint() -> Footprint {
    Footprint {
        length: 4.5,
        width: 1.8,
        rear_axle_offset: 1.35,
    }
}

/// Lateral spacing of the lanes at the intersection.
const LANE_WIDTH: f64 = 3.5;

fn intersection(p: &ScenarioParams, seed: u64, rng: &mut ChaCha8Rng) -> Result<Scenario, SimError> {
    let half = 0.5 * LANE_WIDTH;
    let route = line((-40.0, 0.0), (40.0, 0.0))?;
    // conflict point is x = 0 on the oncoming lane and y = 0 on the crossing ones
    let lanes = vec![
        route.clone(),
        line((80.0, LANE_WIDTH), (-80.0, LANE_WIDTH))?,
        line((-half, 80.0), (-half, -80.0))?,
        line((half, -80.0), (half, 80.0))?,
    ];
    let n = p.n_agents.unwrap_or_else(|| rng.random_range(2..=4));
    let mut agents: Vec<AgentSpec> = Vec::with_capacity(n);
    let mut attempts = 0;
    while agents.len() < n && attempts < 100 {
        attempts += 1;
        let lane = rng.random_range(1..lanes.len());
        let speed = rng.random_range(4.0..8.0);
        let arrival = rng.random_range(1.0..8.0);
        let start_s = 80.0 - speed * arrival;
        let path = lanes[lane].clone();
        // keep two vehicle lengths between agents sharing a lane
        if agents
            .iter()
            .any(|a| a.path == path && (a.start_s - start_s).abs() < 2.0 * car_footprint().length + 1.0)
        {
            continue;
        }
        agents.push(AgentSpec {
            id: agents.len() as u32 + 1,
            kind: AgentKind::LaneFollow,
            footprint: car_footprint(),
            path,
            start_s,
            speed,
            trigger: Trigger::Immediate,
        });
    }
    Ok(Scenario {
        schema_version: SCHEMA_VERSION,
        kind: ScenarioKind::Intersection,
        seed,
        lanes,
        obstacles: vec![],
        ego: EgoSpec {
            start: Pose2D::new(-35.0, 0.0, 0.0),
            start_speed: 6.0,
            goal: Vec2::new(30.0, 0.0),
            route,
            footprint: car_footprint(),
            wheelbase: 2.7,
            max_steering: 0.6,
            limits: EgoLimits {
                v_max: 10.0,
                a_max: 3.0,
                curvature_max: 0.2,
                lateral_a_max: 4.0,
            },
        },
        agents,
        duration: 25.0,
        ramp: None,
    })
}

/// Nominal ego speed in the corridor.
pub const CORRIDOR_SPEED: f64 = 8.0;

fn occluded_corridor(p: &ScenarioParams, seed: u64, rng: &mut ChaCha8Rng) -> Result<Scenario, SimError> {
    let y_b = rng.random_range(2.5..3.5);
    let x_a = rng.random_range(30.0..36.0);
    let alley = 2.5;
    let obstacles = vec![
        rect(5.0, y_b, x_a - 0.5 * alley, 14.0)?,
        rect(x_a + 0.5 * alley, y_b, 68.0, 14.0)?,
    ];
    let speed = match p.darting_speed {
        Some(v) => v,
        None => rng.random_range(1.5..3.0),
    };
    let y0 = rng.random_range(y_b + 1.5..y_b + 5.0);
    let path = line((x_a, 10.0), (x_a, -12.0))?;
    // meet the ego at the alley mouth give or take half a second
    let distance = CORRIDOR_SPEED * y0 / speed + rng.random_range(-4.0..4.0);
    let route = line((0.0, 0.0), (70.0, 0.0))?;
    Ok(Scenario {
        schema_version: SCHEMA_VERSION,
        kind: ScenarioKind::OccludedCorridor,
        seed,
        lanes: vec![route.clone()],
        obstacles,
        ego: EgoSpec {
            start: Pose2D::new(2.0, 0.0, 0.0),
            start_speed: CORRIDOR_SPEED,
            goal: Vec2::new(60.0, 0.0),
            route,
            footprint: Footprint {
                length: 4.0,
                width: 1.8,
                rear_axle_offset: 1.3,
            },
            wheelbase: 2.6,
            max_steering: 0.6,
            limits: EgoLimits {
                v_max: CORRIDOR_SPEED,
                a_max: 3.0,
                curvature_max: 0.2,
                lateral_a_max: 4.0,
            },
        },
        agents: vec![AgentSpec {
            id: 1,
            kind: AgentKind::Scripted,
            footprint: Footprint {
                length: 0.6,
                width: 0.6,
                rear_axle_offset: 0.0,
            },
            start_s: 10.0 - y0,
            path,
            speed,
            trigger: Trigger::EgoWithin {
                point: Vec2::new(x_a, 0.0),
                distance,
            },
        }],
        duration: 30.0,
        ramp: None,
    })
}

pub const PASSAGE_LENGTH: f64 = 30.0;

fn narrow_passage(p: &ScenarioParams, seed: u64, rng: &mut ChaCha8Rng) -> Result<Scenario, SimError> {
    let fp = Footprint {
        length: 2.0,
        width: 1.0,
        rear_axle_offset: 0.0,
    };
    let half = 0.5 * (fp.width * p.width_factor + 0.4);
    let mut obstacles = vec![
        rect(-5.0, half, PASSAGE_LENGTH + 5.0, half + 1.0)?,
        rect(-5.0, -half - 1.0, PASSAGE_LENGTH + 5.0, -half)?,
    ];
    let mut x = 5.0 + rng.random_range(0.0..2.0);
    while x < PASSAGE_LENGTH - 6.0 {
        let len = rng.random_range(1.0..2.0);
        let depth = rng.random_range(0.15..0.35);
        obstacles.push(if rng.random_bool(0.5) {
            rect(x, half - depth, x + len, half)?
        } else {
            rect(x, -half, x + len, -half + depth)?
        });
        x += len + rng.random_range(3.0..6.0);
    }
    let route = line((0.0, 0.0), (PASSAGE_LENGTH, 0.0))?;
    Ok(Scenario {
        schema_version: SCHEMA_VERSION,
        kind: ScenarioKind::NarrowPassage,
        seed,
        lanes: vec![route.clone()],
        obstacles,
        ego: EgoSpec {
            start: Pose2D::new(1.0, 0.0, 0.0),
            start_speed: 0.0,
            goal: Vec2::new(PASSAGE_LENGTH - 1.0, 0.0),
            route,
            footprint: fp,
            wheelbase: 1.4,
            max_steering: 0.6,
            limits: EgoLimits {
                v_max: 3.0,
                a_max: 1.5,
                curvature_max: 0.5,
                lateral_a_max: 1.5,
            },
        },
        agents: vec![],
        duration: 40.0,
        ramp: None,
    })
}

/// Ramp statistics used to draw aircraft evidence.
pub fn default_ramp_model() -> IntentionModel {
    IntentionModel {
        prior: [0.5, 0.5],
        motion: [[0.3, 0.7], [0.9, 0.1]],
        beacon: [[0.9, 0.1], [0.3, 0.7]],
        gse: [[0.9, 0.1], [0.3, 0.7]],
        ramp: [[0.3, 0.1, 0.6], [0.3, 0.5, 0.2]],
        alpha: 0.0,
    }
}

fn airfield_ramp(seed: u64, rng: &mut ChaCha8Rng) -> Result<Scenario, SimError> {
    let model = default_ramp_model();
    let sample = model.sample(rng);
    let route = line((0.0, 0.0), (90.0, 0.0))?;
    let parked = |cx: f64, cy: f64| -> Result<Vec<Polygon>, SimError> {
        Ok(vec![
            rect(cx - 2.0, cy - 15.0, cx + 2.0, cy + 15.0)?,
            rect(cx - 14.0, cy - 2.0, cx + 14.0, cy + 2.0)?,
        ])
    };
    let mut obstacles = Vec::new();
    for cx in [15.0, 70.0] {
        obstacles.extend(parked(cx, 25.0)?);
    }
    let x_taxi = rng.random_range(40.0..50.0);
    let taxi_speed = rng.random_range(3.0..5.0);
    let aircraft = Footprint {
        length: 20.0,
        width: 16.0,
        rear_axle_offset: 0.0,
    };
    let path = line((x_taxi, -60.0), (x_taxi, 60.0))?;
    // nose starts 12 to 20 m short of the service road
    let start_s = 60.0 - 10.0 - 12.0 - rng.random_range(0.0..8.0);
    let (speed, trigger) = match sample.intention {
        Intention::Proceed => (
            taxi_speed,
            Trigger::AtTime {
                time: rng.random_range(0.5..2.0),
            },
        ),
        Intention::Hold => (0.0, Trigger::Immediate),
    };
    Ok(Scenario {
        schema_version: SCHEMA_VERSION,
        kind: ScenarioKind::AirfieldRamp,
        seed,
        lanes: vec![route.clone()],
        obstacles,
        ego: EgoSpec {
            start: Pose2D::new(2.0, 0.0, 0.0),
            start_speed: 5.0,
            goal: Vec2::new(80.0, 0.0),
            route,
            footprint: car_footprint(),
            wheelbase: 2.7,
            max_steering: 0.6,
            limits: EgoLimits {
                v_max: 8.0,
                a_max: 3.0,
                curvature_max: 0.2,
                lateral_a_max: 4.0,
            },
        },
        agents: vec![AgentSpec {
            id: 1,
            kind: AgentKind::Scripted,
            footprint: aircraft,
            path,
            start_s,
            speed,
            trigger,
        }],
        duration: 40.0,
        ramp: Some(RampSpec {
            aircraft_id: 1,
            true_intention: sample.intention,
            aircraft_evidence: sample.aircraft,
            surrounding_evidence: sample.surrounding,
            model,
            taxi_speed,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        for kind in [
            ScenarioKind::Intersection,
            ScenarioKind::OccludedCorridor,
            ScenarioKind::NarrowPassage,
            ScenarioKind::AirfieldRamp,
        ] {
            let p = ScenarioParams::default();
            let a = generate_scenario(kind, &p, 11).unwrap();
            assert_eq!(a, generate_scenario(kind, &p, 11).unwrap());
            assert_eq!(Scenario::from_json(&a.to_json()).unwrap(), a);
        }
    }

    #[test]
    fn darting_speed_is_carried_verbatim() {
        let p = ScenarioParams {
            darting_speed: Some(2.345),
            ..Default::default()
        };
        let s = generate_scenario(ScenarioKind::OccludedCorridor, &p, 5).unwrap();
        assert_eq!(s.agents[0].speed, 2.345);
    }

    #[test]
    fn passage_width_follows_factor() {
        let p = ScenarioParams {
            width_factor: 3.0,
            ..Default::default()
        };
        let s = generate_scenario(ScenarioKind::NarrowPassage, &p, 1).unwrap();
        let (lo, _) = s.obstacles[0].bounds();
        assert!((lo.y - 0.5 * (3.0 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn bad_params_are_rejected() {
        let p = ScenarioParams {
            width_factor: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            generate_scenario(ScenarioKind::NarrowPassage, &p, 1),
            Err(SimError::InvalidParams(_))
        ));
    }
}
