//! Camera/LiDAR fusion for aircraft detection.
//!
//! LiDAR clustering splits an aircraft into several over-segments. Segments
//! whose projection falls inside a camera aircraft box become candidates;
//! a pairwise CRF over nearby candidates is then minimized and the
//! connected AIRCRAFT-labeled candidates are merged into one object.

mod camera;
mod crf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::{project_to_image, ImageRect, PinholeCamera, NEAR_PLANE};
pub use crf::{
    build_graph, energy, icm_trace, merge_segments, minimize_energy, CandidateGraph, Edge, Label, Labeling,
    MergedObject, MinimizeMode, FUSED_PROB_EPS, ICM_MAX_SWEEPS, MAX_EXACT_VERTICES,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("labeling is missing segment {0}")]
    IncompleteLabeling(u64),
    #[error("exact minimization supports at most {max} vertices, got {got}")]
    TooLargeForExact { got: usize, max: usize },
    #[error("invalid camera intrinsics")]
    InvalidCamera,
    #[error("invalid segment {0}")]
    InvalidSegment(u64),
    #[error("invalid camera box {0}")]
    InvalidBox(usize),
    #[error("duplicate segment id {0}")]
    DuplicateId(u64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// LiDAR cluster with axis-aligned half-extents, in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverSegment {
    pub id: u64,
    pub centroid: [f64; 3],
    pub extent: [f64; 3],
    pub lidar_class_prob: f64,
    pub point_count: u32,
}

impl OverSegment {
    pub fn validate(&self) -> Result<(), FusionError> {
        let ok = self.extent.iter().all(|e| *e > 0.0 && e.is_finite())
            && self.centroid.iter().all(|c| c.is_finite())
            && (0.0..=1.0).contains(&self.lidar_class_prob)
            && self.point_count > 0;
        if ok {
            Ok(())
        } else {
            Err(FusionError::InvalidSegment(self.id))
        }
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.centroid[k] - self.extent[k])
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.centroid[k] + self.extent[k])
    }

    pub fn distance(&self, o: &OverSegment) -> f64 {
        let d: f64 = (0..3).map(|k| (self.centroid[k] - o.centroid[k]).powi(2)).sum();
        d.sqrt()
    }
}

/// Camera detection of an aircraft.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraBox {
    pub rect: ImageRect,
    pub camera_class_prob: f64,
    #[serde(default)]
    pub camera_id: u32,
}

/// Segment accepted by [`select_candidates`], with its best-overlapping box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub segment: OverSegment,
    pub camera_prob: Option<f64>,
    pub box_index: Option<usize>,
    pub overlap: f64,
}

impl Candidate {
    /// Candidate without camera support; its unary uses the LiDAR probability alone.
    pub fn lidar_only(segment: OverSegment) -> Self {
        Self {
            segment,
            camera_prob: None,
            box_index: None,
            overlap: 0.0,
        }
    }
}

/// Segments whose projected rectangle covers at least `min_overlap` of its own
/// area inside some aircraft box of this camera.
pub fn select_candidates(
    segments: &[OverSegment],
    boxes: &[CameraBox],
    cam: &PinholeCamera,
    min_overlap: f64,
) -> Result<Vec<Candidate>, FusionError> {
    if !(min_overlap > 0.0 && min_overlap <= 1.0) {
        return Err(FusionError::InvalidParameter("min_overlap must lie in (0, 1]"));
    }
    cam.validate()?;
    for (i, b) in boxes.iter().enumerate() {
        if !b.rect.is_valid() || !(0.0..=1.0).contains(&b.camera_class_prob) {
            return Err(FusionError::InvalidBox(i));
        }
    }
    let mut out = Vec::new();
    for seg in segments {
        seg.validate()?;
        let Some(rect) = project_to_image(seg, cam) else {
            continue;
        };
        let area = rect.area();
        if area <= 0.0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in boxes.iter().enumerate() {
            if b.camera_id != cam.id {
                continue;
            }
            let ratio = rect.intersection_area(&b.rect) / area;
            if best.is_none_or(|(_, r)| ratio > r) {
                best = Some((i, ratio));
            }
        }
        if let Some((i, ratio)) = best {
            if ratio >= min_overlap {
                out.push(Candidate {
                    segment: *seg,
                    camera_prob: Some(boxes[i].camera_class_prob),
                    box_index: Some(i),
                    overlap: ratio,
                });
            }
        }
    }
    Ok(out)
}

/// Everything the `fuse` pipeline needs for one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionScene {
    pub segments: Vec<OverSegment>,
    pub boxes: Vec<CameraBox>,
    pub camera: PinholeCamera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub min_overlap: f64,
    pub radius: f64,
    pub lambda: f64,
    pub mode: MinimizeMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            min_overlap: 0.5,
            radius: 5.0,
            lambda: 1.0,
            mode: MinimizeMode::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutput {
    pub merged: Vec<MergedObject>,
    /// Ids of segments left unmerged: OTHER-labeled candidates and non-candidates.
    pub unmerged: Vec<u64>,
    pub labeling: Labeling,
    pub energy: f64,
}

/// Candidate selection, graph construction, minimization and merging.
pub fn fuse(scene: &FusionScene, cfg: &FusionConfig) -> Result<FusionOutput, FusionError> {
    let candidates = select_candidates(&scene.segments, &scene.boxes, &scene.camera, cfg.min_overlap)?;
    let graph = build_graph(&candidates, cfg.radius, cfg.lambda)?;
    let labeling = minimize_energy(&graph, cfg.mode)?;
    let e = energy(&graph, &labeling)?;
    let merged = merge_segments(&graph, &labeling)?;
    let mut unmerged: Vec<u64> = scene
        .segments
        .iter()
        .map(|s| s.id)
        .filter(|id| labeling.get(id) != Some(&Label::Aircraft))
        .collect();
    unmerged.sort_unstable();
    Ok(FusionOutput {
        merged,
        unmerged,
        labeling,
        energy: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> PinholeCamera {
        PinholeCamera {
            id: 0,
            fx: 500.0,
            fy: 500.0,
            cx: 0.0,
            cy: 0.0,
            position: [0.0; 3],
            yaw: 0.0,
        }
    }

    fn seg(id: u64, y: f64) -> OverSegment {
        OverSegment {
            id,
            centroid: [10.0, y, 0.0],
            extent: [0.01, 1.0, 1.0],
            lidar_class_prob: 0.7,
            point_count: 5,
        }
    }

    fn rect_of(s: &OverSegment) -> ImageRect {
        project_to_image(s, &cam()).unwrap()
    }

    #[test]
    fn no_boxes_no_candidates() {
        let out = select_candidates(&[seg(1, 0.0)], &[], &cam(), 0.5).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn fully_inside_selected_at_any_threshold() {
        let s = seg(1, 0.0);
        let r = rect_of(&s);
        let b = CameraBox {
            rect: ImageRect {
                u_min: r.u_min - 10.0,
                v_min: r.v_min - 10.0,
                u_max: r.u_max + 10.0,
                v_max: r.v_max + 10.0,
            },
            camera_class_prob: 0.9,
            camera_id: 0,
        };
        for t in [0.01, 0.5, 1.0] {
            let out = select_candidates(&[s], &[b], &cam(), t).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].camera_prob, Some(0.9));
        }
    }

    #[test]
    fn half_overlap_threshold() {
        let s = seg(1, 0.0);
        let r = rect_of(&s);
        // box covers the left half of the projected rectangle
        let b = CameraBox {
            rect: ImageRect {
                u_min: r.u_min - 50.0,
                v_min: r.v_min - 50.0,
                u_max: 0.5 * (r.u_min + r.u_max),
                v_max: r.v_max + 50.0,
            },
            camera_class_prob: 0.9,
            camera_id: 0,
        };
        let ratio = r.intersection_area(&b.rect) / r.area();
        assert!((ratio - 0.5).abs() < 1e-12);
        assert!(select_candidates(&[s], &[b], &cam(), 0.6).unwrap().is_empty());
        assert_eq!(select_candidates(&[s], &[b], &cam(), 0.4).unwrap().len(), 1);
    }

    #[test]
    fn boxes_from_other_cameras_ignored() {
        let s = seg(1, 0.0);
        let r = rect_of(&s);
        let b = CameraBox {
            rect: r,
            camera_class_prob: 0.9,
            camera_id: 7,
        };
        assert!(select_candidates(&[s], &[b], &cam(), 0.5).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(select_candidates(&[], &[], &cam(), 0.0).is_err());
        assert!(select_candidates(&[], &[], &cam(), 1.5).is_err());
    }
}
