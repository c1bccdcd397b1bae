//! Upright 7-DoF boxes: residual encoding, rotated IoU and NMS.

mod iou;
mod nms;

#[cfg(test)]
mod tests;

use std::f64::consts::PI;

use thiserror::Error;

pub use iou::{bev_corners, bev_intersection_area, clip_convex, iou_3d, iou_bev, polygon_area, IouKind};
pub use nms::nms;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("decoded box is not finite: {0:?}")]
    Decode([f64; 7]),
}

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = (theta + PI).rem_euclid(two_pi) - PI;
    if t >= PI {
        t -= two_pi;
    }
    t
}

/// Gravity-aligned box: centre, length along the heading, height, width and
/// yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub h: f64,
    pub w: f64,
    pub theta: f64,
}

impl Box7 {
    /// Validates dimensions and wraps the yaw.
    pub fn new(x: f64, y: f64, z: f64, l: f64, h: f64, w: f64, theta: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x,
            y,
            z,
            l,
            h,
            w,
            theta: wrap_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(v: [f64; 7]) -> Result<Self, GeometryError> {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.h, self.w, self.theta]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let v = self.to_array();
        if v.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidBox(format!("non-finite field in {v:?}")));
        }
        if !(self.l > 0.0 && self.h > 0.0 && self.w > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "dimensions must be positive, got l={} h={} w={}",
                self.l, self.h, self.w
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.l * self.h * self.w
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.z - 0.5 * self.h, self.z + 0.5 * self.h)
    }

    /// BEV footprint diagonal.
    pub fn diagonal(&self) -> f64 {
        (self.w * self.w + self.l * self.l).sqrt()
    }

    /// Whether a point lies inside (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lx, ly) = self.to_local(p[0], p[1]);
        let (z0, z1) = self.z_range();
        lx.abs() <= 0.5 * self.l && ly.abs() <= 0.5 * self.w && p[2] >= z0 && p[2] <= z1
    }

    /// World x/y into the box frame (origin at the centre, +x along heading).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Box-frame x/y/z offset into world coordinates.
    pub fn local_to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [
            self.x + c * local[0] - s * local[1],
            self.y + s * local[0] + c * local[1],
            self.z + local[2],
        ]
    }
}

/// Regression residuals of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dl: f64,
    pub dh: f64,
    pub dw: f64,
    pub dtheta: f64,
}

impl BoxDelta {
    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            dl: v[3],
            dh: v[4],
            dw: v[5],
            dtheta: v[6],
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.dl, self.dh, self.dw, self.dtheta]
    }
}

/// Residuals of `gt` against `anchor`: centre offsets normalized by the
/// anchor's BEV diagonal (height for z), log size ratios, and the yaw
/// difference wrapped to `[-π, π)`.
pub fn encode_box(gt: &Box7, anchor: &Box7) -> Result<BoxDelta, GeometryError> {
    gt.validate()?;
    anchor.validate()?;
    let d = anchor.diagonal();
    Ok(BoxDelta {
        dx: (gt.x - anchor.x) / d,
        dy: (gt.y - anchor.y) / d,
        dz: (gt.z - anchor.z) / anchor.h,
        dl: (gt.l / anchor.l).ln(),
        dh: (gt.h / anchor.h).ln(),
        dw: (gt.w / anchor.w).ln(),
        dtheta: wrap_angle(gt.theta - anchor.theta),
    })
}

/// Inverse of [`encode_box`].
pub fn decode_box(delta: &BoxDelta, anchor: &Box7) -> Result<Box7, GeometryError> {
    anchor.validate()?;
    let d = anchor.diagonal();
    let raw = [
        anchor.x + delta.dx * d,
        anchor.y + delta.dy * d,
        anchor.z + delta.dz * anchor.h,
        anchor.l * delta.dl.exp(),
        anchor.h * delta.dh.exp(),
        anchor.w * delta.dw.exp(),
        anchor.theta + delta.dtheta,
    ];
    if raw.iter().any(|v| !v.is_finite()) || raw[3] <= 0.0 || raw[4] <= 0.0 || raw[5] <= 0.0 {
        return Err(GeometryError::Decode(raw));
    }
    Box7::from_array(raw).map_err(|_| GeometryError::Decode(raw))
}
