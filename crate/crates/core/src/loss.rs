//! Training losses: binary cross-entropy on the target map and GIoU + L1 on
//! the boxes decoded at positive tokens.

use serde::{Deserialize, Serialize};

use crate::boxes::{assign_labels, cell_center, BoundingBox, LabelMask};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::heads::Predictions;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    /// Multiplier on the cross-entropy of positive tokens.
    pub pos_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            giou: 2.0,
            l1: 5.0,
            pos_weight: 1.0,
        }
    }
}

/// Box predicted by one token: the center moves by `(d - 0.5) * offset_cells`
/// cells from the token center, the size is taken as is.
pub fn decode_cell(reg: [f64; 4], row: usize, col: usize, grid: usize, offset_cells: f64) -> BoundingBox {
    let (cx, cy) = cell_center(row, col, grid);
    let s = offset_cells / grid as f64;
    BoundingBox::new(cx + (reg[0] - 0.5) * s, cy + (reg[1] - 0.5) * s, reg[2], reg[3])
}

/// Mean binary cross-entropy of the `(grid^2, 1)` logits against the mask.
pub fn cls_loss(g: &mut Graph<'_>, logits: NodeId, mask: &LabelMask, pos_weight: f64) -> Result<NodeId> {
    g.bce_with_logits(logits, &mask.targets(), pos_weight)
}

#[derive(Debug, Clone, Copy)]
pub struct RegLoss {
    /// `giou_weight * giou + l1_weight * l1`.
    pub total: NodeId,
    /// Mean of `1 - GIoU` over positive tokens.
    pub giou: NodeId,
    /// Mean L1 distance between decoded and true `(cx, cy, w, h)`.
    pub l1: NodeId,
}

fn column(len: usize, v: f64) -> Tensor {
    Tensor::full(&[len, 1], v)
}

/// Regression loss over positive tokens; `None` when the mask is empty.
pub fn reg_loss(
    g: &mut Graph<'_>,
    reg: NodeId,
    gt: &BoundingBox,
    mask: &LabelMask,
    offset_cells: f64,
    weights: &LossWeights,
) -> Result<Option<RegLoss>> {
    let grid = mask.grid;
    if g.shape(reg) != [grid * grid, 4] {
        return Err(Error::shape("reg_loss", g.shape(reg), &[grid * grid, 4]));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Ok(None);
    }
    if !gt.is_valid() {
        return Err(Error::invalid("reg_loss", "ground-truth box has no area"));
    }
    let p = idx.len();
    let (base_x, base_y): (Vec<f64>, Vec<f64>) = idx.iter().map(|&i| cell_center(i / grid, i % grid, grid)).unzip();
    let rows = g.gather_rows(reg, idx.into())?;
    let s = offset_cells / grid as f64;

    let coord = |g: &mut Graph<'_>, k: usize| g.slice(rows, 1, k, k + 1);
    let (dx, dy, w, h) = (coord(g, 0)?, coord(g, 1)?, coord(g, 2)?, coord(g, 3)?);
    let center = |g: &mut Graph<'_>, d: NodeId, base: Vec<f64>| -> Result<NodeId> {
        let off = g.add_scalar(d, -0.5);
        let off = g.scale(off, s);
        let base = g.constant(Tensor::new(vec![p, 1], base)?);
        g.add(off, base)
    };
    let cx = center(g, dx, base_x)?;
    let cy = center(g, dy, base_y)?;

    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x0 = g.sub(cx, hw)?;
    let x1 = g.add(cx, hw)?;
    let y0 = g.sub(cy, hh)?;
    let y1 = g.add(cy, hh)?;
    let [gx0, gy0, gx1, gy1] = gt.corners().map(|v| g.constant(column(p, v)));

    let ix0 = g.maximum(x0, gx0)?;
    let ix1 = g.minimum(x1, gx1)?;
    let iy0 = g.maximum(y0, gy0)?;
    let iy1 = g.minimum(y1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let area = g.mul(w, h)?;
    let union = g.sub(area, inter)?;
    let union = g.add_scalar(union, gt.area());
    let iou = g.div(inter, union)?;

    let ex0 = g.minimum(x0, gx0)?;
    let ex1 = g.maximum(x1, gx1)?;
    let ey0 = g.minimum(y0, gy0)?;
    let ey1 = g.maximum(y1, gy1)?;
    let ew = g.sub(ex1, ex0)?;
    let eh = g.sub(ey1, ey0)?;
    let enclosing = g.mul(ew, eh)?;
    let empty = g.sub(enclosing, union)?;
    let penalty = g.div(empty, enclosing)?;
    let giou = g.sub(iou, penalty)?;
    let giou_mean = g.mean(giou);
    let neg = g.scale(giou_mean, -1.0);
    let giou_term = g.add_scalar(neg, 1.0);

    let pred = g.concat(&[cx, cy, w, h], 1)?;
    let truth: Vec<f64> = (0..p).flat_map(|_| [gt.cx, gt.cy, gt.w, gt.h]).collect();
    let truth = g.constant(Tensor::new(vec![p, 4], truth)?);
    let diff = g.sub(pred, truth)?;
    let diff = g.abs(diff);
    let l1_sum = g.sum(diff);
    let l1_term = g.scale(l1_sum, 1.0 / p as f64);

    let a = g.scale(giou_term, weights.giou);
    let b = g.scale(l1_term, weights.l1);
    let total = g.add(a, b)?;
    Ok(Some(RegLoss {
        total,
        giou: giou_term,
        l1: l1_term,
    }))
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: NodeId,
    pub cls: NodeId,
    pub reg: Option<RegLoss>,
    pub mask: LabelMask,
}

impl LossTerms {
    /// True when no token was positive and the regression term was skipped.
    pub fn empty_mask(&self) -> bool {
        self.reg.is_none()
    }
}

/// Classification plus regression loss of one search image with normalized
/// ground truth `gt`.
pub fn total_loss(
    g: &mut Graph<'_>,
    preds: &Predictions,
    gt: &BoundingBox,
    offset_cells: f64,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let mask = assign_labels(gt, preds.grid);
    let cls = cls_loss(g, preds.cls, &mask, weights.pos_weight)?;
    let reg = reg_loss(g, preds.reg, gt, &mask, offset_cells, weights)?;
    let total = match &reg {
        Some(r) => g.add(cls, r.total)?,
        None => cls,
    };
    Ok(LossTerms { total, cls, reg, mask })
}
