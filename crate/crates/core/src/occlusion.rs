//! Occluded regions behind obstacles and the speed caps they imply.
//!
//! A hypothetical agent hidden in a region may emerge from any frontier point
//! at up to `max_speed`. The ego speed at each path station is capped so that,
//! braking from that speed, it comes to rest before any agent could reach the
//! stretch of path it still has to cover.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Polygon, Pose2D, ReferencePath, Vec2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OcclusionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Ray-casting sensor centred on the ego pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    pub range: f64,
    pub fov: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

fn default_resolution() -> f64 {
    0.5_f64.to_radians()
}

impl Sensor {
    pub fn validate(&self) -> Result<(), OcclusionError> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(OcclusionError::InvalidArgument("sensor range must be positive"));
        }
        if !(self.resolution > 0.0) {
            return Err(OcclusionError::InvalidArgument("resolution must be positive"));
        }
        if !(self.fov > 0.0 && self.fov <= TAU) {
            return Err(OcclusionError::InvalidArgument("fov must lie in (0, 2π]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccludedRegion {
    pub polygon: Polygon,
    /// Samples of the boundary parts an agent can cross: the shadow edges,
    /// the far arc and depth jumps. The part lying on the obstacle surface
    /// is left out.
    pub frontier: Vec<Vec2>,
    /// Index of the obstacle casting the shadow.
    pub generator_obstacle: usize,
    /// World bearings of the first and last shadowed ray, widened by half a step.
    pub bearings: [f64; 2],
}

/// Worst-case hidden agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionHypothesis {
    pub max_speed: f64,
    #[serde(default)]
    pub agent_radius: f64,
}

impl OcclusionHypothesis {
    pub fn validate(&self) -> Result<(), OcclusionError> {
        if !(self.max_speed > 0.0 && self.max_speed.is_finite()) {
            return Err(OcclusionError::InvalidArgument("max_speed must be positive"));
        }
        if !(self.agent_radius >= 0.0) {
            return Err(OcclusionError::InvalidArgument("agent_radius must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityConstraintProfile {
    pub stations: Vec<f64>,
    pub v_max: Vec<f64>,
}

impl VelocityConstraintProfile {
    /// Cap at station `s`, taken from the station at or before `s` so that a
    /// point between stations inherits the tighter-or-equal preceding cap.
    pub fn at(&self, s: f64) -> f64 {
        let i = self.stations.partition_point(|&st| st <= s);
        match i {
            0 => self.v_max.first().copied().unwrap_or(f64::INFINITY),
            i => self.v_max[i - 1].min(self.v_max.get(i).copied().unwrap_or(f64::INFINITY)),
        }
    }
}

/// Frontier sample spacing in meters.
pub const FRONTIER_STEP: f64 = 0.25;

struct Hit {
    range: f64,
    obstacle: usize,
    edge: usize,
}

fn cast(origin: Vec2, dir: Vec2, obstacles: &[Polygon], max_range: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (id, poly) in obstacles.iter().enumerate() {
        for (edge, (p, q)) in poly.edges().enumerate() {
            let e = q - p;
            let denom = dir.cross(e);
            if denom.abs() < 1e-15 {
                continue;
            }
            let w = p - origin;
            let t = w.cross(e) / denom;
            let u = w.cross(dir) / denom;
            if t >= 0.0 && t < max_range && (0.0..=1.0).contains(&u) && best.as_ref().is_none_or(|b| t < b.range) {
                best = Some(Hit {
                    range: t,
                    obstacle: id,
                    edge,
                });
            }
        }
    }
    best
}

fn sample_segment(out: &mut Vec<Vec2>, p: Vec2, q: Vec2, step: f64) {
    let n = ((q - p).norm() / step).ceil().max(1.0) as usize;
    for k in 0..=n {
        push_dedup(out, p.lerp(q, k as f64 / n as f64));
    }
}

/// Consecutive rays hitting the same edge or two edges sharing a vertex see
/// one continuous surface; anything else is a depth jump a hidden agent
/// could step out of.
fn continuous_surface(a: &Hit, b: &Hit, n_edges: usize) -> bool {
    let d = a.edge.abs_diff(b.edge);
    d <= 1 || d == n_edges - 1
}

fn push_dedup(v: &mut Vec<Vec2>, p: Vec2) {
    if v.last().is_none_or(|l| l.distance(p) > 1e-9) {
        v.push(p);
    }
}

/// Shadows cast by `obstacles` as seen from the ego sensor.
///
/// Rays are cast every `resolution` across the field of view; each maximal
/// run of consecutive rays blocked by the same obstacle becomes one region
/// bounded by the hit points and the sensor range.
pub fn compute_occluded_regions(
    ego: &Pose2D,
    sensor: &Sensor,
    obstacles: &[Polygon],
) -> Result<Vec<OccludedRegion>, OcclusionError> {
    sensor.validate()?;
    let origin = ego.position();
    let n = ((sensor.fov / sensor.resolution).floor() as usize).max(1);
    let full_circle = sensor.fov >= TAU - 1e-12;
    let rays = if full_circle { n } else { n + 1 };
    let start = ego.heading() - sensor.fov / 2.0;
    let step = if full_circle { TAU / n as f64 } else { sensor.resolution };
    let bearing = |k: usize| start + k as f64 * step;

    let hits: Vec<Option<Hit>> = (0..rays)
        .map(|k| cast(origin, Vec2::from_angle(bearing(k)), obstacles, sensor.range))
        .collect();

    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    let mut k = 0;
    while k < rays {
        let Some(h) = &hits[k] else {
            k += 1;
            continue;
        };
        let id = h.obstacle;
        let first = k;
        while k + 1 < rays && hits[k + 1].as_ref().is_some_and(|h| h.obstacle == id) {
            k += 1;
        }
        runs.push((first, k, id));
        k += 1;
    }
    // a full circle may split one shadow across the seam
    if full_circle && runs.len() > 1 {
        let (f0, _, id0) = runs[0];
        let (_, ln, idn) = runs[runs.len() - 1];
        if f0 == 0 && ln == rays - 1 && id0 == idn {
            let last = runs.pop().unwrap();
            runs[0].0 = last.0;
        }
    }

    let mut regions = Vec::with_capacity(runs.len());
    for (first, last, id) in runs {
        let idx: Vec<usize> = if first <= last {
            (first..=last).collect()
        } else {
            (first..rays).chain(0..=last).collect()
        };
        // bearings are measured from the run start so they stay monotone across the seam
        let base = bearing(idx[0]);
        let lo = base - step / 2.0;
        let hi = base + (idx.len() - 1) as f64 * step + step / 2.0;
        if hi - lo >= TAU - 1e-9 {
            // obstacle surrounds the sensor; everything is hidden
            continue;
        }
        let mut ring = Vec::with_capacity(2 * idx.len() + 8);
        for (j, &k) in idx.iter().enumerate() {
            let r = hits[k].as_ref().map(|h| h.range).unwrap_or(sensor.range);
            let b = base + j as f64 * step;
            push_dedup(&mut ring, origin + Vec2::from_angle(b - step / 2.0) * r);
            push_dedup(&mut ring, origin + Vec2::from_angle(b + step / 2.0) * r);
        }
        let arc_n = (((hi - lo) / step).ceil() as usize).max(1);
        for j in 0..=arc_n {
            let b = hi - (hi - lo) * j as f64 / arc_n as f64;
            push_dedup(&mut ring, origin + Vec2::from_angle(b) * sensor.range);
        }
        if ring
            .first()
            .zip(ring.last())
            .is_some_and(|(a, b)| a.distance(*b) <= 1e-9)
        {
            ring.pop();
        }
        // near chain runs counter-clockwise, so the ring as built is clockwise
        ring.reverse();
        let polygon = match Polygon::from_simple_ccw(ring) {
            Ok(p) => p,
            // degenerate sliver with a hit at full range
            Err(_) => continue,
        };
        // agents cannot walk out of the obstacle surface itself, so the
        // frontier is the two shadow edges, the far arc and any depth jump
        let dir = Vec2::from_angle;
        let r_first = hits[idx[0]].as_ref().map_or(sensor.range, |h| h.range);
        let r_last = hits[idx[idx.len() - 1]].as_ref().map_or(sensor.range, |h| h.range);
        let mut frontier = Vec::new();
        sample_segment(
            &mut frontier,
            origin + dir(lo) * r_first,
            origin + dir(lo) * sensor.range,
            FRONTIER_STEP,
        );
        let arc_samples = (((hi - lo) * sensor.range / FRONTIER_STEP).ceil() as usize).max(1);
        for j in 1..arc_samples {
            push_dedup(
                &mut frontier,
                origin + dir(lo + (hi - lo) * j as f64 / arc_samples as f64) * sensor.range,
            );
        }
        sample_segment(
            &mut frontier,
            origin + dir(hi) * r_last,
            origin + dir(hi) * sensor.range,
            FRONTIER_STEP,
        );
        let n_edges = obstacles[id].len();
        for (j, w) in idx.windows(2).enumerate() {
            if let (Some(a), Some(b)) = (&hits[w[0]], &hits[w[1]]) {
                if !continuous_surface(a, b, n_edges) {
                    let b_mid = base + (j as f64 + 0.5) * step;
                    let (near, far) = (a.range.min(b.range), a.range.max(b.range));
                    sample_segment(
                        &mut frontier,
                        origin + dir(b_mid) * near,
                        origin + dir(b_mid) * far,
                        FRONTIER_STEP,
                    );
                }
            }
        }
        regions.push(OccludedRegion {
            polygon,
            frontier,
            generator_obstacle: id,
            bearings: [lo, hi],
        });
    }
    Ok(regions)
}

/// Distance an agent must still cover to touch `point`, after its radius.
pub fn effective_distance(region: &OccludedRegion, hyp: &OcclusionHypothesis, point: Vec2) -> f64 {
    if region.frontier.is_empty() {
        return f64::INFINITY;
    }
    if region.polygon.contains(point) {
        return 0.0;
    }
    let d = region
        .frontier
        .iter()
        .map(|f| f.distance(point))
        .fold(f64::INFINITY, f64::min);
    (d - hyp.agent_radius).max(0.0)
}

/// Earliest time a hidden agent could reach `point`.
pub fn earliest_arrival(region: &OccludedRegion, hyp: &OcclusionHypothesis, point: Vec2) -> f64 {
    effective_distance(region, hyp, point) / hyp.max_speed
}

/// Probability that an agent launched from the frontier with speed uniform on
/// `[0, max_speed]` has reached `point` by time `t`.
pub fn reach_probability(region: &OccludedRegion, hyp: &OcclusionHypothesis, point: Vec2, t: f64) -> f64 {
    reach_probability_at(effective_distance(region, hyp, point), hyp.max_speed, t)
}

/// [`reach_probability`] for a known effective distance.
pub fn reach_probability_at(d: f64, max_speed: f64, t: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    if t <= 0.0 || !d.is_finite() {
        return 0.0;
    }
    (1.0 - d / (t * max_speed)).clamp(0.0, 1.0)
}

/// Frontier points whose path stations fall in `[s_lo, s_hi]`, none closer
/// than `d_min` to the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationBin {
    pub s_lo: f64,
    pub s_hi: f64,
    pub d_min: f64,
}

impl StationBin {
    /// Lower bound on the distance from the path point at `s` to any point
    /// of the bin. Exact for straight paths up to the sampling step.
    fn distance_bound(&self, s_from: f64, s_to: f64) -> f64 {
        let gap = (self.s_lo - s_to).max(s_from - self.s_hi).max(0.0);
        (self.d_min * self.d_min + gap * gap).sqrt()
    }
}

/// Bins per region summary. Fixed, so the work per (station, region) pair
/// does not depend on how finely the region is described.
pub const SUMMARY_BINS: usize = 16;

/// A region seen from the ego path: its frontier split by path station into
/// at most [`SUMMARY_BINS`] bins, each with the nearest lateral distance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontierSummary {
    pub bins: Vec<StationBin>,
}

impl FrontierSummary {
    pub fn of(region: &OccludedRegion, path: &ReferencePath) -> Option<Self> {
        if region.frontier.is_empty() {
            return None;
        }
        let proj: Vec<(f64, f64)> = region.frontier.iter().map(|&f| path.nearest(f)).collect();
        let lo = proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / SUMMARY_BINS as f64;
        let mut bins: Vec<Option<StationBin>> = vec![None; SUMMARY_BINS];
        for &(s, d) in &proj {
            let k = if width > 0.0 {
                (((s - lo) / width) as usize).min(SUMMARY_BINS - 1)
            } else {
                0
            };
            let b = bins[k].get_or_insert(StationBin {
                s_lo: s,
                s_hi: s,
                d_min: d,
            });
            b.s_lo = b.s_lo.min(s);
            b.s_hi = b.s_hi.max(s);
            b.d_min = b.d_min.min(d);
        }
        let mut bins: Vec<StationBin> = bins.into_iter().flatten().collect();
        // a region the path runs through is reachable everywhere inside it
        let inside: Vec<f64> = path
            .resample(FRONTIER_STEP)
            .iter()
            .filter(|(_, p)| region.polygon.contains(*p))
            .map(|(s, _)| *s)
            .collect();
        if let (Some(&a), Some(&b)) = (inside.first(), inside.last()) {
            let b = StationBin {
                s_lo: a.min(lo),
                s_hi: b.max(hi),
                d_min: 0.0,
            };
            bins.clear();
            bins.push(b);
        }
        Some(Self { bins })
    }

    fn distance_bound(&self, s_from: f64, s_to: f64) -> f64 {
        self.bins
            .iter()
            .map(|b| b.distance_bound(s_from, s_to))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per-pair work counters, for checking that the cost of a cap does not grow
/// with region size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConstraintStats {
    pub pairs: u64,
    pub pair_ops: u64,
}

const BISECTION_STEPS: u32 = 60;

/// Upper bound on [`ConstraintStats::pair_ops`] per (station, region) pair.
pub const MAX_OPS_PER_PAIR: u64 = BISECTION_STEPS as u64 + 1;

/// Largest speed at station `s` whose stopping run stays clear of `sum`.
///
/// Braking at `decel` from `v` covers `[s, s + v²/(2·decel)]` and takes
/// `v/decel`. The speed is admissible when every point of that stretch is
/// further than `v/decel` of agent travel away. Admissibility is monotone in
/// `v`, so a fixed-length bisection finds the boundary.
pub fn station_cap(
    sum: &FrontierSummary,
    hyp: &OcclusionHypothesis,
    s: f64,
    decel: f64,
    clearance: f64,
    nominal: f64,
    ops: &mut u64,
) -> f64 {
    let reach = |v: f64| {
        let end = s + v * v / (2.0 * decel);
        let d = (sum.distance_bound(s, end) - hyp.agent_radius - clearance).max(0.0);
        d / hyp.max_speed
    };
    let ok = |v: f64| reach(v) > v / decel;
    *ops += 1;
    if ok(nominal) {
        return nominal;
    }
    let (mut lo, mut hi) = (0.0, nominal);
    for _ in 0..BISECTION_STEPS {
        *ops += 1;
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub ego_decel: f64,
    pub clearance: f64,
    pub nominal_vmax: f64,
    #[serde(default = "default_station_step")]
    pub station_step: f64,
}

fn default_station_step() -> f64 {
    0.5
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<(), OcclusionError> {
        if !(self.ego_decel > 0.0) {
            return Err(OcclusionError::InvalidArgument("ego_decel must be positive"));
        }
        if !(self.station_step > 0.0) {
            return Err(OcclusionError::InvalidArgument("station_step must be positive"));
        }
        if !(self.nominal_vmax >= 0.0 && self.nominal_vmax.is_finite()) {
            return Err(OcclusionError::InvalidArgument("nominal_vmax must be finite and >= 0"));
        }
        if !(self.clearance >= 0.0) {
            return Err(OcclusionError::InvalidArgument("clearance must be >= 0"));
        }
        Ok(())
    }
}

/// Speed caps along `path`, one per station every `station_step` meters.
/// Stations refer to the ego's leading point.
pub fn derive_velocity_constraints(
    regions: &[OccludedRegion],
    hyp: &OcclusionHypothesis,
    path: &ReferencePath,
    cfg: &ConstraintConfig,
) -> Result<VelocityConstraintProfile, OcclusionError> {
    derive_velocity_constraints_with_stats(regions, hyp, path, cfg).map(|(p, _)| p)
}

pub fn derive_velocity_constraints_with_stats(
    regions: &[OccludedRegion],
    hyp: &OcclusionHypothesis,
    path: &ReferencePath,
    cfg: &ConstraintConfig,
) -> Result<(VelocityConstraintProfile, ConstraintStats), OcclusionError> {
    hyp.validate()?;
    cfg.validate()?;
    let summaries: Vec<FrontierSummary> = regions.iter().filter_map(|r| FrontierSummary::of(r, path)).collect();
    let len = path.length();
    let n = (len / cfg.station_step).ceil().max(1.0) as usize;
    let mut stats = ConstraintStats::default();
    let mut stations = Vec::with_capacity(n + 1);
    let mut v_max = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = (k as f64 * cfg.station_step).min(len);
        if stations.last().is_some_and(|&l| s <= l) {
            continue;
        }
        let mut v = cfg.nominal_vmax;
        for sum in &summaries {
            stats.pairs += 1;
            let cap = station_cap(
                sum,
                hyp,
                s,
                cfg.ego_decel,
                cfg.clearance,
                cfg.nominal_vmax,
                &mut stats.pair_ops,
            );
            v = v.min(cap);
        }
        stations.push(s);
        v_max.push(v);
    }
    Ok((VelocityConstraintProfile { stations, v_max }, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sensor() -> Sensor {
        Sensor {
            range: 50.0,
            fov: PI,
            resolution: 0.5_f64.to_radians(),
        }
    }

    fn wall() -> Polygon {
        Polygon::aabb(Vec2::new(10.0, -2.0), Vec2::new(10.5, 3.0)).unwrap()
    }

    #[test]
    fn no_obstacles_no_regions() {
        let r = compute_occluded_regions(&Pose2D::new(0.0, 0.0, 0.0), &sensor(), &[]).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn wall_shadow_matches_subtended_angle() {
        let r = compute_occluded_regions(&Pose2D::new(0.0, 0.0, 0.0), &sensor(), &[wall()]).unwrap();
        assert_eq!(r.len(), 1);
        let expected = 3.0_f64.atan2(10.0) - (-2.0_f64).atan2(10.0);
        let width = r[0].bearings[1] - r[0].bearings[0];
        assert!((width - expected).abs() <= sensor().resolution, "{width} vs {expected}");
        assert_eq!(r[0].generator_obstacle, 0);
        assert!(r[0].polygon.contains(Vec2::new(20.0, 0.0)));
        assert!(!r[0].polygon.contains(Vec2::new(5.0, 0.0)));
    }

    #[test]
    fn obstacle_behind_is_outside_fov() {
        let behind = Polygon::aabb(Vec2::new(-10.5, -2.0), Vec2::new(-10.0, 2.0)).unwrap();
        let r = compute_occluded_regions(&Pose2D::new(0.0, 0.0, 0.0), &sensor(), &[behind]).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn arrival_is_distance_over_speed() {
        let r = &compute_occluded_regions(&Pose2D::new(0.0, 0.0, 0.0), &sensor(), &[wall()]).unwrap()[0];
        let hyp = OcclusionHypothesis {
            max_speed: 10.0,
            agent_radius: 0.0,
        };
        // the nearest frontier point to (0, 0.5) is where the shadow leaves a wall corner
        let t = earliest_arrival(r, &hyp, Vec2::new(0.0, 0.5));
        let corner = Vec2::new(10.0, 3.0)
            .distance(Vec2::new(0.0, 0.5))
            .min(Vec2::new(10.0, -2.0).distance(Vec2::new(0.0, 0.5)));
        assert!((t - corner / 10.0).abs() < 0.01, "{t}");
        assert_eq!(earliest_arrival(r, &hyp, Vec2::new(30.0, 0.0)), 0.0);
    }

    #[test]
    fn reach_probability_boundaries() {
        assert_eq!(reach_probability_at(10.0, 5.0, 2.0), 0.0);
        assert!((reach_probability_at(10.0, 5.0, 4.0) - 0.5).abs() < 1e-15);
        assert_eq!(reach_probability_at(0.0, 5.0, 0.0), 1.0);
        assert_eq!(reach_probability_at(1.0, 5.0, 0.0), 0.0);
    }

    #[test]
    fn no_regions_nominal_everywhere() {
        let path = ReferencePath::straight(Vec2::new(0.0, 0.0), Vec2::new(20.0, 0.0)).unwrap();
        let cfg = ConstraintConfig {
            ego_decel: 3.0,
            clearance: 1.0,
            nominal_vmax: 10.0,
            station_step: 0.5,
        };
        let hyp = OcclusionHypothesis {
            max_speed: 3.0,
            agent_radius: 0.0,
        };
        let p = derive_velocity_constraints(&[], &hyp, &path, &cfg).unwrap();
        assert_eq!(p.stations.len(), 41);
        assert!(p.v_max.iter().all(|&v| v == 10.0));
    }
}
