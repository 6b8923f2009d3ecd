//! Axis-aligned boxes, overlap measures and label assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center/size box. Coordinates are normalized to the search image unless a
/// function says otherwise; the overlap measures are unit-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// From a top-left corner and size, the convention of ground-truth files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::from_corners(x, y, x + w, y + h)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub fn xywh(&self) -> [f64; 4] {
        let [x0, y0, ..] = self.corners();
        [x0, y0, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)
    }

    /// Intersection with `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let [x0, y0, x1, y1] = self.corners();
        Self::from_corners(
            x0.clamp(0.0, width),
            y0.clamp(0.0, height),
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
        )
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let [a0, a1, a2, a3] = self.corners();
        let [b0, b1, b2, b3] = other.corners();
        let w = (a2.min(b2) - a0.max(b0)).max(0.0);
        let h = (a3.min(b3) - a1.max(b1)).max(0.0);
        w * h
    }

    /// Smallest axis-aligned box containing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        let [a0, a1, a2, a3] = self.corners();
        let [b0, b1, b2, b3] = other.corners();
        Self::from_corners(a0.min(b0), a1.min(b1), a2.max(b2), a3.max(b3))
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (|enclosing| - |union|) / |enclosing|`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    let enclosing = a.enclosing(b).area();
    if enclosing <= 0.0 {
        return Err(Error::invalid("giou", "enclosing box has zero area"));
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Positive/negative assignment of output tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub grid: usize,
    /// Row-major over the grid.
    pub positive: Vec<bool>,
    /// Set when the ground truth was degenerate and every token is negative.
    pub degenerate: bool,
}

impl LabelMask {
    pub fn count(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.positive.len()).filter(|&i| self.positive[i]).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }
}

/// Normalized center of output cell `(row, col)`.
pub fn cell_center(row: usize, col: usize, grid: usize) -> (f64, f64) {
    let g = grid as f64;
    ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g)
}

/// A token is positive when its cell center lies in the half-open box
/// `[x0, x1) x [y0, y1)` of the normalized ground truth.
pub fn assign_labels(gt: &BoundingBox, grid: usize) -> LabelMask {
    if !gt.is_valid() {
        return LabelMask {
            grid,
            positive: vec![false; grid * grid],
            degenerate: true,
        };
    }
    let [x0, y0, x1, y1] = gt.corners();
    let positive = (0..grid * grid)
        .map(|i| {
            let (cx, cy) = cell_center(i / grid, i % grid, grid);
            (x0..x1).contains(&cx) && (y0..y1).contains(&cy)
        })
        .collect();
    LabelMask {
        grid,
        positive,
        degenerate: false,
    }
}
