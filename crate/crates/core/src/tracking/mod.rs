//! Inference loop, crop geometry, synthetic sequences and evaluation.

pub mod crop;
pub mod io;
pub mod metrics;
pub mod simmap;
pub mod synth;

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::heads::PredictionMaps;
use crate::loss::decode_cell;
use crate::model::Twinformer;
use crate::tensor::Tensor;

pub use crop::{crop_region, crop_transform, CropTransform};
pub use metrics::{metrics, Metrics};
pub use simmap::similarity_map;
pub use synth::{synth_sequence, Motion, SynthSpec};

/// Smallest side, in frame pixels, the tracked box may shrink to.
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Frames with one ground-truth box each.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    /// Frame-pixel boxes.
    pub gt: Vec<BoundingBox>,
    /// Set by the generator when the target had to be kept inside the frame.
    pub clamped: bool,
}

impl Sequence {
    pub fn new(name: impl Into<String>, frames: Vec<Tensor>, gt: Vec<BoundingBox>) -> Result<Self> {
        let name = name.into();
        if frames.is_empty() || frames.len() != gt.len() {
            return Err(Error::invalid(
                "sequence",
                format!("`{name}`: {} frames, {} boxes", frames.len(), gt.len()),
            ));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("sequence frame", &shape, &[0, 0, 3]));
        }
        if let Some(f) = frames.iter().find(|f| f.shape() != shape) {
            return Err(Error::shape("sequence frame", f.shape(), &shape));
        }
        Ok(Self {
            name,
            frames,
            gt,
            clamped: false,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` in pixels.
    pub fn frame_size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackMode {
    /// Fixed template, no temporal information.
    #[default]
    Baseline,
    /// Adds the previous frame's pooled search feature as a template token.
    St,
}

impl FromStr for TrackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "st" => Ok(Self::St),
            _ => Err(Error::invalid("track mode", format!("`{s}` (expected baseline or st)"))),
        }
    }
}

impl fmt::Display for TrackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::St => "st",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackOptions {
    pub mode: TrackMode,
    pub template_factor: f64,
    pub search_factor: f64,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            mode: TrackMode::Baseline,
            template_factor: 1.5,
            search_factor: 3.0,
        }
    }
}

impl TrackOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::Config(format!(
                "crop factors must be positive, got {} and {}",
                self.template_factor, self.search_factor
            )));
        }
        Ok(())
    }
}

/// Bit-level hash of a tensor's shape and values.
pub fn tensor_hash(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Global average of `(tokens, C)` features: the `(1, C)` context token.
pub fn context_token(features: &Tensor) -> Result<Tensor> {
    let [n, c] = *features.shape() else {
        return Err(Error::shape("context_token", features.shape(), &[0, 0]));
    };
    if n == 0 {
        return Err(Error::invalid("context_token", "no tokens"));
    }
    let mut out = vec![0.0; c];
    for row in features.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(vec![1, c], out.into_iter().map(|v| v / n as f64).collect())
}

/// Highest-scoring token, its box in frame pixels and `sigmoid(logit)`.
/// Ties go to the smallest row-major index.
pub fn decode_prediction(maps: &PredictionMaps, tf: &CropTransform, offset_cells: f64) -> (BoundingBox, f64) {
    let mut best = 0;
    for (i, &v) in maps.cls.iter().enumerate() {
        if v > maps.cls[best] {
            best = i;
        }
    }
    let (row, col) = (best / maps.grid, best % maps.grid);
    let local = decode_cell(maps.reg[best], row, col, maps.grid, offset_cells);
    let confidence = 1.0 / (1.0 + (-maps.cls[best]).exp());
    (tf.normalized_to_frame(&local), confidence)
}

/// Restricts `b` to the frame, keeping at least [`MIN_BOX_SIDE`] per side.
pub fn fit_to_frame(b: &BoundingBox, width: f64, height: f64) -> BoundingBox {
    let clipped = b.clamp_to(width, height);
    let side = |v: f64, limit: f64| v.max(MIN_BOX_SIDE).min(limit);
    let (w, h) = (side(clipped.w, width), side(clipped.h, height));
    let cx = clipped.cx.clamp(0.5 * w, width - 0.5 * w);
    let cy = clipped.cy.clamp(0.5 * h, height - 0.5 * h);
    BoundingBox::new(cx, cy, w, h)
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    /// Template crop taken from the first frame; never modified afterwards.
    pub template: Tensor,
    pub template_hash: u64,
    /// Last box in frame pixels, always inside the frame.
    pub prev: BoundingBox,
    /// Context token for the next frame in spatio-temporal mode.
    pub context: Option<Tensor>,
    pub frame_width: usize,
    pub frame_height: usize,
}

/// Result of tracking one frame.
#[derive(Debug, Clone)]
pub struct Step {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub maps: PredictionMaps,
    pub transform: CropTransform,
}

pub struct Tracker<'m> {
    model: &'m Twinformer,
    options: TrackOptions,
    state: TrackerState,
}

impl<'m> Tracker<'m> {
    /// Crops the template around the first-frame box. In spatio-temporal mode
    /// the first context token pools a search crop of the first frame.
    pub fn init(model: &'m Twinformer, frame: &Tensor, init: &BoundingBox, options: TrackOptions) -> Result<Self> {
        options.validate()?;
        let c = model.config();
        let (template, _) = crop_region(frame, init, options.template_factor, c.template_size)?;
        let (frame_height, frame_width) = (frame.shape()[0], frame.shape()[1]);
        let context = match options.mode {
            TrackMode::Baseline => None,
            TrackMode::St => {
                let (search, _) = crop_region(frame, init, options.search_factor, c.search_size)?;
                let mut g = Graph::inference(model.params());
                let f = model.forward_features(&mut g, &template, &search, None)?;
                Some(g.value(f.search_context).clone())
            }
        };
        Ok(Self {
            model,
            options,
            state: TrackerState {
                template_hash: tensor_hash(&template),
                template,
                prev: fit_to_frame(init, frame_width as f64, frame_height as f64),
                context,
                frame_width,
                frame_height,
            },
        })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn options(&self) -> &TrackOptions {
        &self.options
    }

    /// Searches around the previous box, decodes the best token and moves
    /// the previous box there.
    pub fn step(&mut self, frame: &Tensor) -> Result<Step> {
        let s = &mut self.state;
        if frame.shape() != [s.frame_height, s.frame_width, 3] {
            return Err(Error::shape(
                "tracker frame",
                frame.shape(),
                &[s.frame_height, s.frame_width, 3],
            ));
        }
        let c = self.model.config();
        let (search, transform) = crop_region(frame, &s.prev, self.options.search_factor, c.search_size)?;
        let mut g = Graph::inference(self.model.params());
        let (features, preds) = self.model.forward(&mut g, &s.template, &search, s.context.as_ref())?;
        let maps = PredictionMaps::from_graph(&g, &preds);
        let (raw, confidence) = decode_prediction(&maps, &transform, c.offset_cells);
        let bbox = fit_to_frame(&raw, s.frame_width as f64, s.frame_height as f64);
        s.prev = bbox;
        if self.options.mode == TrackMode::St {
            s.context = Some(g.value(features.search_context).clone());
        }
        Ok(Step {
            bbox,
            confidence,
            maps,
            transform,
        })
    }
}

/// Tracks from the first ground-truth box; entry 0 is that box with
/// confidence 1.
pub fn track_sequence(model: &Twinformer, seq: &Sequence, options: &TrackOptions) -> Result<Vec<(BoundingBox, f64)>> {
    if seq.len() < 2 {
        return Err(Error::invalid("track_sequence", "need at least two frames"));
    }
    let mut tracker = Tracker::init(model, &seq.frames[0], &seq.gt[0], *options)?;
    let mut out = Vec::with_capacity(seq.len());
    out.push((tracker.state().prev, 1.0));
    for frame in &seq.frames[1..] {
        let step = tracker.step(frame)?;
        out.push((step.bbox, step.confidence));
    }
    Ok(out)
}

/// Per-frame boxes and confidences of one tracked sequence.
pub type Track = Vec<(BoundingBox, f64)>;

/// Tracks every sequence, spreading them over up to `jobs` threads. Results
/// come back in input order.
pub fn track_all(model: &Twinformer, seqs: &[Sequence], options: &TrackOptions, jobs: usize) -> Result<Vec<Track>> {
    let jobs = jobs.clamp(1, seqs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Track>>>> = Mutex::new((0..seqs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seqs.len() {
                    break;
                }
                let r = track_sequence(model, &seqs[i], options);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}
