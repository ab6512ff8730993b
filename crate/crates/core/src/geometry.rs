//! Axis-aligned box geometry in normalized image coordinates.
//!
//! Every box in the crate is stored as corner coordinates expressed as
//! fractions of the image width and height. Pixel coordinates are a derived
//! view obtained with [`BBox::to_pixels`], so boxes survive a non-uniform
//! (stretch) resize of the underlying image unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate in box ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("box corners out of order: min ({0}, {1}) exceeds max ({2}, {3})")]
    Inverted(f64, f64, f64, f64),
    #[error("box coordinate outside [0, 1]: ({0}, {1}, {2}, {3})")]
    OutOfRange(f64, f64, f64, f64),
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDimensions { width: u32, height: u32 },
}

/// Normalized corner-form bounding box.
///
/// Invariants: `x_min <= x_max`, `y_min <= y_max`, all coordinates in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    /// The full-frame box `(0, 0, 1, 1)`.
    pub const FULL: BBox = BBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 1.0,
        y_max: 1.0,
    };

    /// Builds a box, rejecting anything that violates the invariants.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::Inverted(x_min, y_min, x_max, y_max));
        }
        if ![x_min, y_min, x_max, y_max]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
        {
            return Err(GeometryError::OutOfRange(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from arbitrary finite corners, clamping every coordinate
    /// into `[0, 1]`. Returns the box and whether any clamping happened.
    ///
    /// Corners must still be ordered; clamping never reorders them.
    pub fn clipped(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    ) -> Result<(Self, bool), GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::Inverted(x_min, y_min, x_max, y_max));
        }
        let c = |v: f64| v.clamp(0.0, 1.0);
        let b = Self {
            x_min: c(x_min),
            y_min: c(y_min),
            x_max: c(x_max),
            y_max: c(y_max),
        };
        let changed = b.x_min != x_min || b.y_min != y_min || b.x_max != x_max || b.y_max != y_max;
        Ok((b, changed))
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Zero width or zero height.
    pub fn is_degenerate(&self) -> bool {
        self.x_min == self.x_max || self.y_min == self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Two zero-area boxes give 0, never NaN.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn to_yolo(&self) -> YoloBox {
        YoloBox {
            cx: (self.x_min + self.x_max) / 2.0,
            cy: (self.y_min + self.y_max) / 2.0,
            w: self.x_max - self.x_min,
            h: self.y_max - self.y_min,
        }
    }

    /// Scales the box to a `width` x `height` pixel grid.
    pub fn to_pixels(&self, width: u32, height: u32) -> Result<PixelRect, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDimensions { width, height });
        }
        let (w, h) = (f64::from(width), f64::from(height));
        Ok(PixelRect {
            x_min: self.x_min * w,
            y_min: self.y_min * h,
            x_max: self.x_max * w,
            y_max: self.y_max * h,
        })
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Center-form box as written in YOLO label files: `cx cy w h`, normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoloBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl YoloBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Converts to corner form, clamping into the unit square.
    ///
    /// Fails only for non-finite input or negative extents. The flag reports
    /// whether clamping changed anything.
    pub fn to_corner_checked(&self) -> Result<(BBox, bool), GeometryError> {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        BBox::clipped(self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    /// Infallible conversion for boxes satisfying the `YoloBox` invariants.
    ///
    /// # Panics
    /// If a coordinate is non-finite or an extent is negative.
    pub fn to_corner(&self) -> BBox {
        self.to_corner_checked()
            .expect("YoloBox with finite, non-negative extents")
            .0
    }
}

impl From<BBox> for YoloBox {
    fn from(b: BBox) -> Self {
        b.to_yolo()
    }
}

/// A box in pixel units; produced only by [`BBox::to_pixels`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn yolo_to_corner(y: &YoloBox) -> BBox {
    y.to_corner()
}

pub fn corner_to_yolo(b: &BBox) -> YoloBox {
    b.to_yolo()
}

pub fn to_pixels(b: &BBox, width: u32, height: u32) -> Result<PixelRect, GeometryError> {
    b.to_pixels(width, height)
}
