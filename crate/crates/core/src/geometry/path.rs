use serde::{Deserialize, Serialize};

use super::shapes::point_segment_distance;
use super::{GeometryError, Pose2D, Vec2};

/// Polyline with cumulative arc length and per-point tangent heading.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferencePath {
    waypoints: Vec<Vec2>,
    #[serde(skip)]
    stations: Vec<f64>,
    #[serde(skip)]
    headings: Vec<f64>,
}

impl<'de> Deserialize<'de> for ReferencePath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            waypoints: Vec<Vec2>,
        }
        let raw = Raw::deserialize(d)?;
        ReferencePath::new(raw.waypoints).map_err(serde::de::Error::custom)
    }
}

/// Tolerance under which two non-adjacent segments count as equidistant.
pub const AMBIGUITY_TOL: f64 = 1e-9;

impl ReferencePath {
    pub fn new(waypoints: Vec<Vec2>) -> Result<Self, GeometryError> {
        if waypoints.len() < 2 {
            return Err(GeometryError::InvalidPath("need at least two waypoints"));
        }
        if waypoints.iter().any(|w| !w.is_finite()) {
            return Err(GeometryError::InvalidPath("non-finite waypoint"));
        }
        let mut stations = Vec::with_capacity(waypoints.len());
        stations.push(0.0);
        for w in waypoints.windows(2) {
            let len = w[0].distance(w[1]);
            if len <= 0.0 {
                return Err(GeometryError::InvalidPath("consecutive waypoints coincide"));
            }
            let next = stations.last().copied().unwrap_or(0.0) + len;
            stations.push(next);
        }
        let n = waypoints.len();
        let headings = (0..n)
            .map(|i| {
                let (a, b) = if i + 1 < n {
                    (waypoints[i], waypoints[i + 1])
                } else {
                    (waypoints[i - 1], waypoints[i])
                };
                (b - a).angle()
            })
            .collect();
        Ok(Self {
            waypoints,
            stations,
            headings,
        })
    }

    /// Straight path from `a` to `b`.
    pub fn straight(a: Vec2, b: Vec2) -> Result<Self, GeometryError> {
        Self::new(vec![a, b])
    }

    pub fn waypoints(&self) -> &[Vec2] {
        &self.waypoints
    }

    pub fn stations(&self) -> &[f64] {
        &self.stations
    }

    pub fn headings(&self) -> &[f64] {
        &self.headings
    }

    pub fn length(&self) -> f64 {
        *self.stations.last().expect("path has at least two waypoints")
    }

    pub fn segment_count(&self) -> usize {
        self.waypoints.len() - 1
    }

    fn segment_at(&self, s: f64) -> usize {
        // last segment whose start station is <= s
        let idx = self.stations.partition_point(|&st| st <= s);
        idx.saturating_sub(1).min(self.segment_count() - 1)
    }

    /// Position and tangent heading at arc length `s` (clamped onto the path).
    pub fn point_at(&self, s: f64) -> (Vec2, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let a = self.waypoints[i];
        let b = self.waypoints[i + 1];
        let seg_len = self.stations[i + 1] - self.stations[i];
        let t = ((s - self.stations[i]) / seg_len).clamp(0.0, 1.0);
        (a.lerp(b, t), (b - a).angle())
    }

    /// Path point at `s`, displaced `d` along the left normal; heading is the path tangent.
    pub fn frenet_to_cartesian(&self, s: f64, d: f64) -> Result<Pose2D, GeometryError> {
        if !(0.0..=self.length()).contains(&s) || !d.is_finite() {
            return Err(GeometryError::OutOfRange {
                s,
                length: self.length(),
            });
        }
        let (p, heading) = self.point_at(s);
        let n = Vec2::from_angle(heading).perp();
        Ok(Pose2D::from_position(p + n * d, heading))
    }

    /// Arc length of the foot point and signed lateral offset (left positive).
    pub fn cartesian_to_frenet(&self, pose: &Pose2D) -> Result<(f64, f64), GeometryError> {
        self.project(pose.position())
    }

    pub fn project(&self, p: Vec2) -> Result<(f64, f64), GeometryError> {
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        let mut dists = Vec::with_capacity(self.segment_count());
        for i in 0..self.segment_count() {
            let (d, t) = point_segment_distance(p, self.waypoints[i], self.waypoints[i + 1]);
            dists.push(d);
            if d < best.0 {
                best = (d, i, t);
            }
        }
        let (dist, i, t) = best;
        for (j, &dj) in dists.iter().enumerate() {
            if (j + 1 < i || j > i + 1) && (dj - dist).abs() <= AMBIGUITY_TOL {
                return Err(GeometryError::AmbiguousProjection {
                    first: i.min(j),
                    second: i.max(j),
                });
            }
        }
        let a = self.waypoints[i];
        let b = self.waypoints[i + 1];
        let foot = a.lerp(b, t);
        let s = self.stations[i] + t * (self.stations[i + 1] - self.stations[i]);
        let rel = p - foot;
        let side = (b - a).cross(rel);
        let d = if side >= 0.0 { dist } else { -dist };
        Ok((s, d))
    }

    /// Station of the nearest path point and the Euclidean distance to it.
    /// Unlike [`ReferencePath::project`] this never fails; ties go to the
    /// lowest segment.
    pub fn nearest(&self, p: Vec2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.segment_count() {
            let (d, t) = point_segment_distance(p, self.waypoints[i], self.waypoints[i + 1]);
            if d < best.0 {
                best = (d, self.stations[i] + t * (self.stations[i + 1] - self.stations[i]));
            }
        }
        (best.1, best.0)
    }

    /// Uniformly resampled points every `step` meters of arc length, including both ends.
    pub fn resample(&self, step: f64) -> Vec<(f64, Vec2)> {
        let len = self.length();
        let n = (len / step).ceil().max(1.0) as usize;
        (0..=n)
            .map(|k| {
                let s = len * k as f64 / n as f64;
                (s, self.point_at(s).0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x_axis() -> ReferencePath {
        ReferencePath::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)]).unwrap()
    }

    #[test]
    fn axis_aligned_projection() {
        let (s, d) = x_axis().cartesian_to_frenet(&Pose2D::new(3.0, 0.5, 0.0)).unwrap();
        assert!((s - 3.0).abs() < 1e-12);
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn on_path_point_has_zero_offset() {
        let (_, d) = x_axis().cartesian_to_frenet(&Pose2D::new(7.25, 0.0, 0.0)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn inverse_examples() {
        let path = x_axis();
        let p = path.frenet_to_cartesian(3.0, 0.5).unwrap();
        assert!((p.x - 3.0).abs() < 1e-12 && (p.y - 0.5).abs() < 1e-12 && p.heading() == 0.0);
        let p0 = path.frenet_to_cartesian(0.0, 0.0).unwrap();
        assert_eq!(p0.position(), Vec2::ZERO);
        assert!(path.frenet_to_cartesian(10.5, 0.0).is_err());
        assert!(path.frenet_to_cartesian(-0.1, 0.0).is_err());
    }

    #[test]
    fn rejects_repeated_waypoints() {
        assert!(ReferencePath::new(vec![Vec2::ZERO, Vec2::ZERO]).is_err());
        assert!(ReferencePath::new(vec![Vec2::ZERO]).is_err());
    }

    #[test]
    fn ambiguous_projection_detected() {
        // U-turn: the point between both legs is equidistant to non-adjacent segments
        let path = ReferencePath::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(10.0, 0.0),
            Vec2::new(10.0, 4.0),
            Vec2::new(0.0, 4.0),
        ])
        .unwrap();
        let err = path.project(Vec2::new(5.0, 2.0)).unwrap_err();
        assert!(matches!(err, GeometryError::AmbiguousProjection { .. }));
    }

    #[test]
    fn stations_strictly_increase() {
        let path = ReferencePath::new(vec![Vec2::ZERO, Vec2::new(3.0, 4.0), Vec2::new(3.0, 10.0)]).unwrap();
        assert_eq!(path.stations(), &[0.0, 5.0, 11.0]);
        assert_eq!(path.length(), 11.0);
    }
}
