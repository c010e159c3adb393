//! Planar geometry shared by every planner: poses, rectangular footprints,
//! polygons and their clearance, Frenet conversion along polyline paths, and
//! swept volumes that do not cut corners.

mod path;
mod shapes;
mod swept;
mod vec;

use thiserror::Error;

pub use path::{ReferencePath, AMBIGUITY_TOL};
pub use shapes::{
    footprint_polygon, point_segment_distance, polygon_clearance, polygons_overlap, segments_intersect, Clearance,
    Footprint, Polygon, Witness,
};
pub use swept::{
    convex_in_union, corner_displacement, midpoint_contained, swept_poses, swept_volume, within_convex, CONTAINMENT_TOL,
};
pub use vec::{angle_diff, normalize_angle, Pose2D, Vec2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid footprint {length} x {width}")]
    InvalidFootprint { length: f64, width: f64 },
    #[error("invalid polygon: {0}")]
    InvalidPolygon(&'static str),
    #[error("invalid path: {0}")]
    InvalidPath(&'static str),
    #[error("ambiguous projection between segments {first} and {second}")]
    AmbiguousProjection { first: usize, second: usize },
    #[error("arc length {s} outside path of length {length}")]
    OutOfRange { s: f64, length: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}
