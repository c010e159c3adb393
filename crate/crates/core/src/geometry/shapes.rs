use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose2D, Vec2};

/// Rectangular vehicle outline. The pose reference point sits
/// `rear_axle_offset` meters behind the geometric center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
    #[serde(default)]
    pub rear_axle_offset: f64,
}

impl Footprint {
    pub fn new(length: f64, width: f64, rear_axle_offset: f64) -> Result<Self, GeometryError> {
        let fp = Self {
            length,
            width,
            rear_axle_offset,
        };
        fp.validate()?;
        Ok(fp)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.length > 0.0 && self.width > 0.0) || !self.rear_axle_offset.is_finite() {
            return Err(GeometryError::InvalidFootprint {
                length: self.length,
                width: self.width,
            });
        }
        if !self.length.is_finite() || !self.width.is_finite() {
            return Err(GeometryError::InvalidFootprint {
                length: self.length,
                width: self.width,
            });
        }
        Ok(())
    }

    /// Corner offsets in the body frame, counter-clockwise starting front-right.
    pub fn local_corners(&self) -> [Vec2; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let c = self.rear_axle_offset;
        [
            Vec2::new(c + hl, -hw),
            Vec2::new(c + hl, hw),
            Vec2::new(c - hl, hw),
            Vec2::new(c - hl, -hw),
        ]
    }

    /// Distance from the reference point to the front bumper.
    pub fn front_extent(&self) -> f64 {
        self.rear_axle_offset + 0.5 * self.length
    }

    /// Distance from the reference point to the rear bumper.
    pub fn rear_extent(&self) -> f64 {
        0.5 * self.length - self.rear_axle_offset
    }

    pub fn circumradius(&self) -> f64 {
        self.local_corners().iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// Places the footprint at `pose`.
pub fn footprint_polygon(pose: &Pose2D, fp: &Footprint) -> Polygon {
    let corners = fp.local_corners().map(|c| pose.transform(c));
    Polygon {
        vertices: corners.to_vec(),
    }
}

/// Simple counter-clockwise polygon with at least three vertices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Polygon {
    vertices: Vec<Vec2>,
}

impl<'de> Deserialize<'de> for Polygon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            vertices: Vec<Vec2>,
        }
        let raw = Raw::deserialize(d)?;
        Polygon::new_any_orientation(raw.vertices).map_err(serde::de::Error::custom)
    }
}

impl Polygon {
    /// Validates a counter-clockwise simple polygon.
    pub fn new(vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidPolygon("fewer than 3 vertices"));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPolygon("non-finite vertex"));
        }
        let area = signed_area(&vertices);
        if area <= 0.0 {
            return Err(GeometryError::InvalidPolygon(
                "signed area not positive (expected counter-clockwise)",
            ));
        }
        if !is_simple(&vertices) {
            return Err(GeometryError::InvalidPolygon("self-intersecting"));
        }
        Ok(Self { vertices })
    }

    /// Skips the quadratic simplicity test; callers guarantee a simple
    /// counter-clockwise ring by construction.
    pub(crate) fn from_simple_ccw(vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 || vertices.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPolygon("fewer than 3 finite vertices"));
        }
        if signed_area(&vertices) <= 0.0 {
            return Err(GeometryError::InvalidPolygon(
                "signed area not positive (expected counter-clockwise)",
            ));
        }
        Ok(Self { vertices })
    }

    /// Like [`Polygon::new`] but reverses clockwise input.
    pub fn new_any_orientation(mut vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        if vertices.len() >= 3 && signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Self::new(vertices)
    }

    /// Axis-aligned box from its corner extremes.
    pub fn aabb(min: Vec2, max: Vec2) -> Result<Self, GeometryError> {
        Self::new(vec![
            Vec2::new(min.x, min.y),
            Vec2::new(max.x, min.y),
            Vec2::new(max.x, max.y),
            Vec2::new(min.x, max.y),
        ])
    }

    /// Oriented rectangle around `center`.
    pub fn oriented_box(center: Vec2, heading: f64, length: f64, width: f64) -> Result<Self, GeometryError> {
        let fp = Footprint::new(length, width, 0.0)?;
        Ok(footprint_polygon(&Pose2D::from_position(center, heading), &fp))
    }

    /// Regular polygon approximating a disc.
    pub fn regular(center: Vec2, radius: f64, sides: usize) -> Result<Self, GeometryError> {
        let n = sides.max(3);
        let verts = (0..n)
            .map(|i| center + Vec2::from_angle(2.0 * std::f64::consts::PI * i as f64 / n as f64) * radius)
            .collect();
        Self::new(verts)
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Edge `i` runs from vertex `i` to vertex `i + 1` (cyclic).
    pub fn edge(&self, i: usize) -> (Vec2, Vec2) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n])
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        (0..self.vertices.len()).map(move |i| self.edge(i))
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Vec2 {
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut a2 = 0.0;
        for (p, q) in self.edges() {
            let w = p.cross(q);
            a2 += w;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        Vec2::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }

    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    /// Point-in-polygon test; boundary points count as inside.
    pub fn contains(&self, p: Vec2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if point_segment_distance(p, a, b).0 <= 1e-12 {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Nearest boundary point to `p`: (distance, edge index, edge parameter).
    pub fn nearest_boundary(&self, p: Vec2) -> (f64, usize, f64) {
        let mut best = (f64::INFINITY, 0, 0.0);
        for (i, (a, b)) in self.edges().enumerate() {
            let (d, t) = point_segment_distance(p, a, b);
            if d < best.0 {
                best = (d, i, t);
            }
        }
        best
    }

    /// Euclidean distance from a point to the polygon (0 inside).
    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        if self.contains(p) {
            0.0
        } else {
            self.nearest_boundary(p).0
        }
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            (b - a).cross(c - b) >= -1e-12
        })
    }
}

pub(crate) fn signed_area(v: &[Vec2]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        s += v[i].cross(v[(i + 1) % n]);
    }
    0.5 * s
}

fn is_simple(v: &[Vec2]) -> bool {
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if (b - a).norm_sq() == 0.0 {
            return false;
        }
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (c, d) = (v[j], v[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Distance from `p` to segment `ab` and the clamped parameter of the foot point.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_sq();
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p - (a + ab * t)).norm(), t)
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Feature pair that realizes a [`Clearance`] value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Witness {
    /// Vertex of the first polygon against an edge of the second.
    VertexOfA {
        vertex: usize,
        edge: usize,
        t: f64,
    },
    /// Vertex of the second polygon against an edge of the first.
    VertexOfB {
        vertex: usize,
        edge: usize,
        t: f64,
    },
    None,
}

/// Separation between two polygons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    /// Minimum distance, 0 when the polygons touch or overlap.
    pub distance: f64,
    pub overlap: bool,
    /// Distance from the deepest contained vertex to the other boundary.
    pub depth: f64,
    /// Unit direction in which translating the first polygon increases separation.
    pub direction: Vec2,
    pub witness: Witness,
}

impl Clearance {
    /// Distance when apart, negative depth when overlapping.
    pub fn signed_distance(&self) -> f64 {
        if self.overlap {
            -self.depth
        } else {
            self.distance
        }
    }
}

/// True iff the closed polygons share at least one point. Symmetric in its arguments.
pub fn polygons_overlap(a: &Polygon, b: &Polygon) -> bool {
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    if alo.x > bhi.x || blo.x > ahi.x || alo.y > bhi.y || blo.y > ahi.y {
        return false;
    }
    for (p, q) in a.edges() {
        for (r, s) in b.edges() {
            if segments_intersect(p, q, r, s) {
                return true;
            }
        }
    }
    b.contains(a.vertices[0]) || a.contains(b.vertices[0])
}

fn fallback_direction(a: &Polygon, b: &Polygon) -> Vec2 {
    (a.centroid() - b.centroid())
        .normalized()
        .unwrap_or(Vec2::new(1.0, 0.0))
}

/// Minimum distance between two polygons, with overlap flag and push direction.
pub fn polygon_clearance(a: &Polygon, b: &Polygon) -> Clearance {
    if !polygons_overlap(a, b) {
        let mut best = f64::INFINITY;
        let mut witness = Witness::None;
        let mut dir = Vec2::ZERO;
        for (i, &v) in a.vertices.iter().enumerate() {
            let (d, e, t) = b.nearest_boundary(v);
            if d < best {
                best = d;
                witness = Witness::VertexOfA { vertex: i, edge: e, t };
                let (p, q) = b.edge(e);
                dir = (v - p.lerp(q, t)) * (1.0 / d);
            }
        }
        for (j, &v) in b.vertices.iter().enumerate() {
            let (d, e, t) = a.nearest_boundary(v);
            if d < best {
                best = d;
                witness = Witness::VertexOfB { vertex: j, edge: e, t };
                let (p, q) = a.edge(e);
                dir = (p.lerp(q, t) - v) * (1.0 / d);
            }
        }
        return Clearance {
            distance: best,
            overlap: false,
            depth: 0.0,
            direction: dir,
            witness,
        };
    }

    const TIE: f64 = 1e-9;
    let mut depth = -1.0;
    let mut witness = Witness::None;
    let mut dir = Vec2::ZERO;
    for (i, &v) in a.vertices.iter().enumerate() {
        if !b.contains(v) {
            continue;
        }
        let (d, e, t) = b.nearest_boundary(v);
        if d > depth + TIE {
            depth = d;
            witness = Witness::VertexOfA { vertex: i, edge: e, t };
            let (p, q) = b.edge(e);
            dir = p.lerp(q, t) - v;
        }
    }
    for (j, &v) in b.vertices.iter().enumerate() {
        if !a.contains(v) {
            continue;
        }
        let (d, e, t) = a.nearest_boundary(v);
        if d > depth + TIE {
            depth = d;
            witness = Witness::VertexOfB { vertex: j, edge: e, t };
            let (p, q) = a.edge(e);
            dir = v - p.lerp(q, t);
        }
    }
    let direction = match dir.normalized() {
        Some(u) if depth > 0.0 => u,
        _ => {
            witness = Witness::None;
            fallback_direction(a, b)
        }
    };
    Clearance {
        distance: 0.0,
        overlap: true,
        depth: depth.max(0.0),
        direction,
        witness,
    }
}
