//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it shares no code with
//! the reverse pass it checks.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (label, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn observe(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_error(analytic, numeric);
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }
}

fn scalar(g: &Graph<'_>, id: NodeId) -> f64 {
    g.value(id).data()[0]
}

/// Checks d loss / d input for every element of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'static>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(scalar(&g, loss))
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .node(*id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            report.observe(&format!("input{k}"), j, analytic[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks d loss / d parameter for the selected parameters of `store`.
pub fn check_params<F>(store: &mut ParamStore, params: &[ParamId], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s>) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| {
            grads
                .param(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.tensor(p).len()])
        })
        .collect();
    drop(grads);

    let mut report = GradCheckReport::default();
    for (k, &pid) in params.iter().enumerate() {
        let name = store.get(pid).name.clone();
        for j in 0..store.tensor(pid).len() {
            let orig = store.tensor(pid).data()[j];
            let eval_at = |v: f64, store: &mut ParamStore| -> Result<f64> {
                store.get_mut(pid).tensor.data_mut()[j] = v;
                let mut g = Graph::inference(store);
                let loss = f(&mut g)?;
                Ok(scalar(&g, loss))
            };
            let plus = eval_at(orig + step, store)?;
            let minus = eval_at(orig - step, store)?;
            store.get_mut(pid).tensor.data_mut()[j] = orig;
            report.observe(&name, j, analytic[k][j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
