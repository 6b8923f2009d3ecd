//! First-order optimizers over a [`ParamStore`]'s accumulated gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl Schedule {
    /// Learning rate at `step` of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// Momentum buffer, or Adam's first moment.
    m: Vec<Vec<f64>>,
    /// Adam's second moment.
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        let v = match config.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::AdamW => zeros.clone(),
        };
        Ok(Self {
            config,
            m: zeros,
            v,
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter_map(|(_, p)| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update using the gradients scaled by `grad_scale`, then
    /// clears them. Parameters without a gradient only see weight decay and
    /// momentum.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) -> Result<()> {
        let norm = Self::grad_norm(store) * grad_scale.abs();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let scale = grad_scale * clip;
        self.t += 1;
        let c = self.config;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad: Vec<f64> = match store.get(id).tensor.grad() {
                Some(g) => g.iter().map(|v| v * scale).collect(),
                None => vec![0.0; store.get(id).tensor.len()],
            };
            let mut data = store.tensor(id).data().to_vec();
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((x, g), m) in data.iter_mut().zip(&grad).zip(&mut self.m[k]) {
                        let g = g + c.weight_decay * *x;
                        *m = c.momentum * *m + g;
                        *x -= c.learning_rate * *m;
                    }
                }
                OptimizerKind::AdamW => {
                    let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    for (((x, g), m), v) in data.iter_mut().zip(&grad).zip(&mut self.m[k]).zip(&mut self.v[k]) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                        *x -= c.learning_rate * (update + c.weight_decay * *x);
                    }
                }
            }
            store.set_data(id, &data)?;
        }
        store.zero_grads();
        Ok(())
    }
}
