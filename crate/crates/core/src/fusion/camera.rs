use serde::{Deserialize, Serialize};

use super::{FusionError, OverSegment};

/// Pinhole camera. The camera sits at `position` in the vehicle frame
/// (x forward, y left, z up) and looks horizontally along `yaw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeCamera {
    #[serde(default)]
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

/// Points closer than this to the image plane are clipped away.
pub const NEAR_PLANE: f64 = 1e-3;

impl PinholeCamera {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(FusionError::InvalidCamera);
        }
        Ok(())
    }

    /// Vehicle-frame point to optical frame (x right, y down, z along the axis).
    pub fn to_optical(&self, p: [f64; 3]) -> [f64; 3] {
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        let dz = p[2] - self.position[2];
        let (s, c) = self.yaw.sin_cos();
        let fwd = c * dx + s * dy;
        let left = -s * dx + c * dy;
        [-left, -dz, fwd]
    }

    /// Pixel coordinates of an optical-frame point in front of the camera.
    pub fn pixel(&self, q: [f64; 3]) -> (f64, f64) {
        (self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy)
    }
}

/// Axis-aligned image rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRect {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl ImageRect {
    pub fn area(&self) -> f64 {
        (self.u_max - self.u_min).max(0.0) * (self.v_max - self.v_min).max(0.0)
    }

    pub fn intersection_area(&self, o: &ImageRect) -> f64 {
        let w = self.u_max.min(o.u_max) - self.u_min.max(o.u_min);
        let h = self.v_max.min(o.v_max) - self.v_min.max(o.v_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn is_valid(&self) -> bool {
        self.u_min < self.u_max && self.v_min < self.v_max
    }
}

fn box_corners(seg: &OverSegment) -> [[f64; 3]; 8] {
    let c = seg.centroid;
    let e = seg.extent;
    let mut out = [[0.0; 3]; 8];
    for (k, corner) in out.iter_mut().enumerate() {
        let sx = if k & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if k & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if k & 4 == 0 { -1.0 } else { 1.0 };
        *corner = [c[0] + sx * e[0], c[1] + sy * e[1], c[2] + sz * e[2]];
    }
    out
}

/// Bounding rectangle of the projected segment box, `None` when the box is
/// entirely behind the image plane. Parts behind the plane are clipped.
pub fn project_to_image(seg: &OverSegment, cam: &PinholeCamera) -> Option<ImageRect> {
    let corners = box_corners(seg).map(|p| cam.to_optical(p));
    if corners.iter().all(|q| q[2] <= NEAR_PLANE) {
        return None;
    }
    let mut pts: Vec<[f64; 3]> = corners.iter().copied().filter(|q| q[2] > NEAR_PLANE).collect();
    // box edges join corners differing in exactly one index bit
    for a in 0..8usize {
        for bit in [1usize, 2, 4] {
            let b = a ^ bit;
            if b < a {
                continue;
            }
            let (qa, qb) = (corners[a], corners[b]);
            if (qa[2] > NEAR_PLANE) != (qb[2] > NEAR_PLANE) {
                let t = (NEAR_PLANE - qa[2]) / (qb[2] - qa[2]);
                pts.push([qa[0] + t * (qb[0] - qa[0]), qa[1] + t * (qb[1] - qa[1]), NEAR_PLANE]);
            }
        }
    }
    let mut r = ImageRect {
        u_min: f64::INFINITY,
        v_min: f64::INFINITY,
        u_max: f64::NEG_INFINITY,
        v_max: f64::NEG_INFINITY,
    };
    for q in pts {
        let (u, v) = cam.pixel(q);
        r.u_min = r.u_min.min(u);
        r.u_max = r.u_max.max(u);
        r.v_min = r.v_min.min(v);
        r.v_max = r.v_max.max(v);
    }
    Some(r)
}
