use super::shapes::{footprint_polygon, Footprint, Polygon};
use super::{GeometryError, Pose2D, Vec2};

/// Points of the midpoint footprint may lie this far outside the union of its neighbours.
pub const CONTAINMENT_TOL: f64 = 1e-3;

const MAX_DEPTH: u32 = 30;

/// Footprints along `poses`, refined until neighbouring footprints leave no gap.
///
/// Between any two consecutive output poses the footprint at the interpolated
/// midpoint lies inside the union of the two neighbours (within
/// [`CONTAINMENT_TOL`]), and no corner moves more than `max_gap` between
/// neighbours. The result is a list of footprints, never a merged hull.
pub fn swept_volume(poses: &[Pose2D], fp: &Footprint, max_gap: f64) -> Result<Vec<Polygon>, GeometryError> {
    Ok(swept_poses(poses, fp, max_gap)?
        .iter()
        .map(|p| footprint_polygon(p, fp))
        .collect())
}

/// Refined pose sequence behind [`swept_volume`].
pub fn swept_poses(poses: &[Pose2D], fp: &Footprint, max_gap: f64) -> Result<Vec<Pose2D>, GeometryError> {
    if poses.len() < 2 {
        return Err(GeometryError::InvalidArgument("swept volume needs at least two poses"));
    }
    if !(max_gap > 0.0) {
        return Err(GeometryError::InvalidArgument("max_gap must be positive"));
    }
    fp.validate()?;
    let mut out = Vec::with_capacity(poses.len() * 2);
    out.push(poses[0]);
    for w in poses.windows(2) {
        refine(w[0], w[1], fp, max_gap, 0, &mut out);
        out.push(w[1]);
    }
    Ok(out)
}

fn refine(a: Pose2D, b: Pose2D, fp: &Footprint, max_gap: f64, depth: u32, out: &mut Vec<Pose2D>) {
    if depth >= MAX_DEPTH {
        return;
    }
    if corner_displacement(&a, &b, fp) <= max_gap && midpoint_contained(&a, &b, fp, CONTAINMENT_TOL) {
        return;
    }
    let mid = a.interpolate(&b, 0.5);
    refine(a, mid, fp, max_gap, depth + 1, out);
    out.push(mid);
    refine(mid, b, fp, max_gap, depth + 1, out);
}

/// Largest distance any footprint corner travels between the two poses.
pub fn corner_displacement(a: &Pose2D, b: &Pose2D, fp: &Footprint) -> f64 {
    fp.local_corners()
        .iter()
        .map(|&c| a.transform(c).distance(b.transform(c)))
        .fold(0.0, f64::max)
}

/// Whether the footprint at the midpoint of `a` and `b` lies in the union of
/// the footprints at `a` and `b`, allowing `tol` meters of slack.
pub fn midpoint_contained(a: &Pose2D, b: &Pose2D, fp: &Footprint, tol: f64) -> bool {
    let pa = footprint_polygon(a, fp);
    let pb = footprint_polygon(b, fp);
    let pm = footprint_polygon(&a.interpolate(b, 0.5), fp);
    convex_in_union(&pm, &pa, &pb, tol)
}

/// `m ⊆ a ∪ b` for convex polygons, with `tol` slack.
///
/// Every point of `m` outside `a` lies beyond at least one edge line of `a`;
/// the part of `m` beyond each edge is convex, so checking its vertices
/// against `b` is exact.
pub fn convex_in_union(m: &Polygon, a: &Polygon, b: &Polygon, tol: f64) -> bool {
    for (p, q) in a.edges() {
        let Some(n) = outward_normal(p, q) else {
            continue;
        };
        let offset = n.dot(p) + tol;
        // closure of a non-empty open slice equals the closed slice, so only
        // strictly protruding parts need checking
        if m.vertices().iter().all(|&v| n.dot(v) <= offset) {
            continue;
        }
        let outside = clip_halfplane(m.vertices(), n, offset);
        if outside.iter().any(|&v| !within_convex(b, v, tol)) {
            return false;
        }
    }
    true
}

fn outward_normal(p: Vec2, q: Vec2) -> Option<Vec2> {
    let e = q - p;
    Vec2::new(e.y, -e.x).normalized()
}

/// Vertices of the convex polygon `poly ∩ { x : n·x ≥ offset }`.
fn clip_halfplane(poly: &[Vec2], n: Vec2, offset: f64) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let len = poly.len();
    for i in 0..len {
        let cur = poly[i];
        let nxt = poly[(i + 1) % len];
        let dc = n.dot(cur) - offset;
        let dn = n.dot(nxt) - offset;
        if dc >= 0.0 {
            out.push(cur);
        }
        if (dc >= 0.0) != (dn >= 0.0) {
            let t = dc / (dc - dn);
            out.push(cur.lerp(nxt, t));
        }
    }
    out
}

/// Point inside the convex polygon grown by `tol` along every edge normal.
pub fn within_convex(poly: &Polygon, v: Vec2, tol: f64) -> bool {
    poly.edges().all(|(p, q)| match outward_normal(p, q) {
        Some(n) => n.dot(v - p) <= tol,
        None => true,
    })
}
