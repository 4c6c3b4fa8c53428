//! Normalized center-format boxes shared by labels, detections and metrics.

use serde::{Deserialize, Serialize};

/// A box in YOLO center format, all fields as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// The box covering the whole image.
    pub const fn full() -> Self {
        Self::new(0.5, 0.5, 1.0, 1.0)
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    /// Intersect with the unit square. Returns `None` when nothing of the box
    /// remains inside the image.
    pub fn clamp_unit(&self) -> Option<Self> {
        let [x0, y0, x1, y1] = self.to_xyxy();
        if x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 && self.w > 0.0 && self.h > 0.0 {
            return Some(*self);
        }
        let (x0, y0) = (x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0));
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        if x1 > x0 && y1 > y0 {
            Some(Self::from_xyxy(x0, y0, x1, y1))
        } else {
            None
        }
    }
}
