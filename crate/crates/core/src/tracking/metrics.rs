//! Average overlap and success rates.

use serde::Serialize;

use crate::boxes::{iou, BoundingBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean IoU over the scored frames.
    pub ao: f64,
    /// Fraction of scored frames with IoU above 0.5.
    pub sr50: f64,
    /// Fraction of scored frames with IoU above 0.75.
    pub sr75: f64,
    /// IoU of every frame after the first.
    pub ious: Vec<f64>,
}

pub fn success_rate(ious: &[f64], threshold: f64) -> f64 {
    ious.iter().filter(|&&v| v > threshold).count() as f64 / ious.len() as f64
}

/// Scores `preds` against `gts`. Frame 0 initializes the tracker and is
/// excluded.
pub fn metrics(preds: &[BoundingBox], gts: &[BoundingBox]) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "metrics",
            format!("{} predictions for {} ground-truth boxes", preds.len(), gts.len()),
        ));
    }
    if preds.len() < 2 {
        return Err(Error::invalid("metrics", "need at least two frames"));
    }
    let ious: Vec<f64> = preds[1..].iter().zip(&gts[1..]).map(|(p, g)| iou(p, g)).collect();
    Ok(Metrics {
        ao: ious.iter().sum::<f64>() / ious.len() as f64,
        sr50: success_rate(&ious, 0.5),
        sr75: success_rate(&ious, 0.75),
        ious,
    })
}

/// Per-sequence scores averaged with equal weight per sequence.
pub fn mean_metrics(all: &[Metrics]) -> Option<(f64, f64, f64)> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    Some((mean(|m| m.ao), mean(|m| m.sr50), mean(|m| m.sr75)))
}
