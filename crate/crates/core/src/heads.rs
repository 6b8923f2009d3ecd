//! Classification and box-regression heads over the output token grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Init, ParamId, ParamStore};

/// Three linear layers with ReLU in between.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl MlpHead {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        let widths = [input, hidden, hidden, output];
        let mut layers = Vec::with_capacity(3);
        for (i, pair) in widths.windows(2).enumerate() {
            let w = store.init(
                format!("{prefix}.fc{i}.w"),
                &[pair[0], pair[1]],
                Init::TruncNormal(0.02),
                rng,
            )?;
            let b = store.init(format!("{prefix}.fc{i}.b"), &[pair[1]], Init::Zeros, rng)?;
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            let (w, b) = (g.param(w), g.param(b));
            h = g.linear(h, w, Some(b))?;
        }
        Ok(h)
    }
}

/// Head outputs still attached to the graph.
#[derive(Debug, Clone, Copy)]
pub struct Predictions {
    /// `(grid^2, 1)` target logits.
    pub cls: NodeId,
    /// `(grid^2, 4)` sigmoid outputs `(dx, dy, w, h)`.
    pub reg: NodeId,
    pub grid: usize,
}

/// Head outputs as plain values, row-major over the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps {
    pub grid: usize,
    pub cls: Vec<f64>,
    pub reg: Vec<[f64; 4]>,
}

impl PredictionMaps {
    pub fn from_graph(g: &Graph<'_>, p: &Predictions) -> Self {
        let cls = g.value(p.cls).data().to_vec();
        let reg = g
            .value(p.reg)
            .data()
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Self { grid: p.grid, cls, reg }
    }
}

/// Runs both heads on `f_out (grid^2, features)`.
pub fn mlp_head(
    g: &mut Graph<'_>,
    f_out: NodeId,
    grid: usize,
    cls_head: &MlpHead,
    reg_head: &MlpHead,
) -> Result<Predictions> {
    let shape = g.shape(f_out).to_vec();
    if shape.len() != 2 || shape[0] != grid * grid {
        return Err(Error::shape("mlp_head", &shape, &[grid * grid]));
    }
    let cls = cls_head.forward(g, f_out)?;
    let reg = reg_head.forward(g, f_out)?;
    let reg = g.sigmoid(reg);
    Ok(Predictions { cls, reg, grid })
}
