use serde::{Deserialize, Serialize};

/// Axis-aligned image box in pixels, stored as center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: (x1 - x0).max(0.0),
            h: (y1 - y0).max(0.0),
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x1().min(other.x1()) - self.x0().max(other.x0());
        let h = self.y1().min(other.y1()) - self.y0().max(other.y0());
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection over union in `[0, 1]`; 0 when both boxes are empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x0().clamp(0.0, width);
        let x1 = self.x1().clamp(0.0, width);
        let y0 = self.y0().clamp(0.0, height);
        let y1 = self.y1().clamp(0.0, height);
        BBox::from_corners(x0, y0, x1, y1)
    }
}

/// Object-level motion verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Static,
    Moving,
}

impl MotionClass {
    pub const ALL: [MotionClass; 2] = [MotionClass::Static, MotionClass::Moving];

    pub fn as_str(self) -> &'static str {
        match self {
            MotionClass::Static => "static",
            MotionClass::Moving => "moving",
        }
    }
}

/// A detected vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Vehicle-class probability.
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_class: Option<MotionClass>,
    /// Flat grid-cell index that produced the detection (tie-breaking only).
    #[serde(default)]
    pub cell: usize,
}

/// A ground-truth vehicle box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub id: u32,
    pub bbox: BBox,
    pub motion: MotionClass,
    /// Fraction of the object's projected silhouette hidden by nearer objects.
    pub occlusion: f64,
}
