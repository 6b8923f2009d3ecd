//! Template/search pair sampling and a small deterministic trainer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, LossWeights};
use crate::model::Twinformer;
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::tensor::Tensor;
use crate::tracking::{crop_region, Sequence};

/// How training pairs are cut from a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSampling {
    /// Largest frame distance between template and search frame.
    pub max_gap: usize,
    /// Search-crop center shift, uniform in `+-jitter * sqrt(w h)` per axis.
    pub center_jitter: f64,
    /// Search-crop scale factor `exp(u)`, `u` uniform in `+-scale_jitter`.
    pub scale_jitter: f64,
    pub template_factor: f64,
    pub search_factor: f64,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            max_gap: 10,
            center_jitter: 0.25,
            scale_jitter: 0.1,
            template_factor: 1.5,
            search_factor: 3.0,
        }
    }
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Pair {
    pub template: Tensor,
    pub search: Tensor,
    /// Target box normalized to the search crop.
    pub target: BoundingBox,
}

/// Draws both frames of a pair from `seq`.
pub fn sample_pair<R: Rng + ?Sized>(
    seq: &Sequence,
    model: &ModelConfig,
    sampling: &PairSampling,
    rng: &mut R,
) -> Result<Pair> {
    let n = seq.len();
    let i = rng.random_range(0..n);
    let lo = i.saturating_sub(sampling.max_gap);
    let hi = (i + sampling.max_gap).min(n - 1);
    let j = rng.random_range(lo..=hi);

    let (template, _) = crop_region(
        &seq.frames[i],
        &seq.gt[i],
        sampling.template_factor,
        model.template_size,
    )?;
    let gt = seq.gt[j];
    let side = (gt.w * gt.h).sqrt();
    let mut shift = || {
        if sampling.center_jitter > 0.0 {
            rng.random_range(-sampling.center_jitter..=sampling.center_jitter) * side
        } else {
            0.0
        }
    };
    let (dx, dy) = (shift(), shift());
    let s = if sampling.scale_jitter > 0.0 {
        rng.random_range(-sampling.scale_jitter..=sampling.scale_jitter).exp()
    } else {
        1.0
    };
    let anchor = BoundingBox::new(gt.cx + dx, gt.cy + dy, gt.w * s, gt.h * s);
    let (search, tf) = crop_region(&seq.frames[j], &anchor, sampling.search_factor, model.search_size)?;
    Ok(Pair {
        template,
        search,
        target: tf.frame_to_normalized(&gt),
    })
}

/// `count` pairs, cycling over the sequences in order.
pub fn make_pairs(
    seqs: &[Sequence],
    count: usize,
    model: &ModelConfig,
    sampling: &PairSampling,
    seed: u64,
) -> Result<Vec<Pair>> {
    if seqs.is_empty() {
        return Err(Error::invalid("make_pairs", "no sequences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| sample_pair(&seqs[k % seqs.len()], model, sampling, &mut rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Pairs per update; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub loss: LossWeights,
    pub sampling: PairSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::Constant,
            loss: LossWeights::default(),
            sampling: PairSampling::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.loss.giou >= 0.0 && self.loss.l1 >= 0.0 && self.loss.pos_weight > 0.0) {
            return Err(Error::Config(format!("invalid loss weights {:?}", self.loss)));
        }
        let s = &self.sampling;
        if !(s.template_factor > 0.0 && s.search_factor > 0.0 && s.center_jitter >= 0.0 && s.scale_jitter >= 0.0) {
            return Err(Error::Config(format!("invalid pair sampling {s:?}")));
        }
        self.optimizer.validate()
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// A fixed set, visited in a reshuffled order every epoch.
    Pairs(&'a [Pair]),
    /// Fresh pairs each step from a uniformly chosen sequence.
    Sequences(&'a [Sequence]),
}

/// Batch-mean losses before the update of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Forward and loss on one pair; accumulates gradients into the model's
/// store when `backward` is set.
pub fn pair_loss(model: &mut Twinformer, pair: &Pair, weights: &LossWeights, backward: bool) -> Result<LossValues> {
    let offset = model.config().offset_cells;
    let (values, grads) = {
        let mut g = if backward {
            Graph::with_params(model.params())
        } else {
            Graph::inference(model.params())
        };
        let (_, preds) = model.forward(&mut g, &pair.template, &pair.search, None)?;
        let terms = total_loss(&mut g, &preds, &pair.target, offset, weights)?;
        let scalar = |g: &Graph<'_>, n| g.value(n).data()[0];
        let values = LossValues {
            total: scalar(&g, terms.total),
            cls: scalar(&g, terms.cls),
            giou: terms.reg.map_or(0.0, |r| scalar(&g, r.giou)),
            l1: terms.reg.map_or(0.0, |r| scalar(&g, r.l1)),
        };
        if !values.total.is_finite() {
            return Err(Error::NonFinite(g.first_non_finite().unwrap_or("loss")));
        }
        let grads = if backward { Some(g.backward(terms.total)?) } else { None };
        (values, grads)
    };
    if let Some(grads) = grads {
        grads.accumulate_into(model.params_mut());
    }
    Ok(values)
}

/// Mean loss over `pairs` without touching the parameters.
pub fn evaluate(model: &mut Twinformer, pairs: &[Pair], weights: &LossWeights) -> Result<LossValues> {
    let mut sum = LossValues {
        total: 0.0,
        cls: 0.0,
        giou: 0.0,
        l1: 0.0,
    };
    for p in pairs {
        let v = pair_loss(model, p, weights, false)?;
        sum.total += v.total;
        sum.cls += v.cls;
        sum.giou += v.giou;
        sum.l1 += v.l1;
    }
    let n = pairs.len().max(1) as f64;
    Ok(LossValues {
        total: sum.total / n,
        cls: sum.cls / n,
        giou: sum.giou / n,
        l1: sum.l1 / n,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            what: format!("non-finite value from {what}"),
        },
        e => e,
    }
}

/// Runs `config.steps` updates. `on_step` sees every log entry as it is
/// produced. The result depends only on the model, the data and the config.
pub fn train(
    model: &mut Twinformer,
    data: TrainData<'_>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    config.validate()?;
    match data {
        TrainData::Pairs([]) => return Err(Error::invalid("train", "no pairs")),
        TrainData::Sequences([]) => return Err(Error::invalid("train", "no sequences")),
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, model.params())?;
    model.params_mut().zero_grads();
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut sum = [0.0; 4];
        for _ in 0..config.batch_size {
            let sampled;
            let pair = match data {
                TrainData::Pairs(pairs) => {
                    if order.is_empty() {
                        order = (0..pairs.len()).collect();
                        order.shuffle(&mut rng);
                    }
                    &pairs[order.pop().expect("refilled above")]
                }
                TrainData::Sequences(seqs) => {
                    let seq = &seqs[rng.random_range(0..seqs.len())];
                    sampled = sample_pair(seq, model.config(), &config.sampling, &mut rng)?;
                    &sampled
                }
            };
            let v = pair_loss(model, pair, &config.loss, true).map_err(|e| diverged(step, e))?;
            for (s, x) in sum.iter_mut().zip([v.total, v.cls, v.giou, v.l1]) {
                *s += x;
            }
        }
        let b = config.batch_size as f64;
        let log = StepLog {
            step,
            total: sum[0] / b,
            cls: sum[1] / b,
            giou: sum[2] / b,
            l1: sum[3] / b,
        };
        opt.set_learning_rate(config.schedule.rate(config.optimizer.learning_rate, step, config.steps));
        opt.step(model.params_mut(), 1.0 / b).map_err(|e| diverged(step, e))?;
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// `step,total,cls,giou,l1` per line, with a header.
pub fn write_loss_csv(path: impl AsRef<Path>, logs: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for log in logs {
        w.serialize(log)?;
    }
    w.flush()?;
    Ok(())
}
