//! Cosine similarity between the template center and every search token.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Twinformer;
use crate::tensor::Tensor;

/// Row-major index of the template token at the grid center; for even grids
/// the lower-right of the four central tokens.
pub fn center_index(grid: usize) -> usize {
    (grid / 2) * grid + grid / 2
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity of `query` with each row of the `(grid^2, C)` matrix
/// `tokens`, as a `(grid, grid)` map.
pub fn cosine_map(query: &[f64], tokens: &Tensor, grid: usize) -> Result<Tensor> {
    let c = query.len();
    if tokens.shape() != [grid * grid, c] {
        return Err(Error::shape("cosine_map", tokens.shape(), &[grid * grid, c]));
    }
    let data = tokens.data().chunks_exact(c).map(|row| cosine(query, row)).collect();
    Tensor::new(vec![grid, grid], data)
}

/// Similarity of the template center token to the search tokens, both taken
/// where the streams enter the first cross block.
pub fn similarity_map(model: &Twinformer, template: &Tensor, search: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(model.params());
    let f = model.forward_features(&mut g, template, search, None)?;
    let t = g.value(f.template_pre_cross.tokens);
    let c = t.shape()[1];
    let tg = f.template_pre_cross.height;
    let query = &t.data()[center_index(tg) * c..][..c];
    let s = f.search_pre_cross;
    cosine_map(query, g.value(s.tokens), s.height)
}

/// One CSV row per map row.
pub fn write_map_csv(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let [_, w] = *map.shape() else {
        return Err(Error::shape("write_map_csv", map.shape(), &[0, 0]));
    };
    let mut out = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in map.data().chunks_exact(w) {
        out.write_record(row.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}
