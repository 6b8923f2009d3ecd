//! Multi-head attention and its local (windowed, optionally shifted),
//! global and cross variants.
//!
//! Token maps are stored as `(tokens, channels)` matrices in row-major
//! spatial order. Window partitioning and cyclic shifts are row gathers, so
//! both are exact permutations with exact inverses.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Score added to masked (query, key) pairs; `exp` of it underflows to 0.
pub const MASK_VALUE: f64 = -1e9;

/// Tokens with a 2-D arrangement: `height * width` grid tokens in row-major
/// order followed by `extra` non-spatial tokens (e.g. a context token).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMap {
    pub tokens: NodeId,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub extra: usize,
}

impl TokenMap {
    pub fn new(g: &Graph<'_>, tokens: NodeId, height: usize, width: usize) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 2 || s[0] != height * width {
            return Err(Error::shape("token_map", s, &[height * width]));
        }
        Ok(Self {
            tokens,
            height,
            width,
            channels: s[1],
            extra: 0,
        })
    }

    pub fn grid_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.grid_len() + self.extra
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn with_tokens(self, tokens: NodeId) -> Self {
        Self { tokens, ..self }
    }
}

/// Projection weights of one multi-head attention layer.
///
/// Per-head matrices are column blocks of the fused `d_model x d_model`
/// projections: head `i` owns columns `i*d_k .. (i+1)*d_k` of `wq`, `wk`,
/// `wv` and rows `i*d_k .. (i+1)*d_k` of `wo`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub dim: usize,
    /// Relative position bias table `((2M-1)^2, heads)` and its window size `M`.
    pub rel_bias: Option<(ParamId, usize)>,
}

impl AttentionWeights {
    /// Registers weights under `prefix`; `window` adds a relative position bias table.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: Option<usize>,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{prefix}: {heads} heads do not divide model width {dim}"
            )));
        }
        let mut proj = |name: &str| -> Result<(ParamId, ParamId)> {
            let w = store.init(format!("{prefix}.w{name}"), &[dim, dim], Init::TruncNormal(0.02), rng)?;
            let b = store.init(format!("{prefix}.b{name}"), &[dim], Init::Zeros, rng)?;
            Ok((w, b))
        };
        let (wq, bq) = proj("q")?;
        let (wk, bk) = proj("k")?;
        let (wv, bv) = proj("v")?;
        let (wo, bo) = proj("o")?;
        let rel_bias = match window {
            Some(m) => {
                let side = 2 * m - 1;
                let t = store.init(format!("{prefix}.rel_bias"), &[side * side, heads], Init::Zeros, rng)?;
                Some((t, m))
            }
            None => None,
        };
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
            dim,
            rel_bias,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn without_bias(&self) -> Self {
        Self {
            rel_bias: None,
            ..self.clone()
        }
    }
}

fn split_heads(g: &mut Graph<'_>, x: NodeId, batch: usize, n: usize, heads: usize, dk: usize) -> Result<NodeId> {
    let p = g.permute_view(x, &[batch, n, heads, dk], &[0, 2, 1, 3])?;
    g.reshape(p, &[batch * heads, n, dk])
}

/// Batched attention core: `batch` independent groups of `nq` queries
/// attending to `nkv` keys.
///
/// `bias` has shape `(heads, nq, nkv)` and is shared by all groups; `mask`
/// has shape `(batch, heads, nq, nkv)`.
pub(crate) fn attend(
    g: &mut Graph<'_>,
    q_in: NodeId,
    kv_in: NodeId,
    batch: usize,
    w: &AttentionWeights,
    bias: Option<NodeId>,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let (qs, ks) = (g.shape(q_in).to_vec(), g.shape(kv_in).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != w.dim || ks[1] != w.dim {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if qs[0] % batch != 0 || ks[0] % batch != 0 {
        return Err(Error::invalid("attention", "token count not divisible by batch"));
    }
    let (nq, nkv) = (qs[0] / batch, ks[0] / batch);
    let (h, dk) = (w.heads, w.head_dim());

    let (wq, bq) = (g.param(w.wq), g.param(w.bq));
    let (wk, bk) = (g.param(w.wk), g.param(w.bk));
    let (wv, bv) = (g.param(w.wv), g.param(w.bv));
    let q = g.linear(q_in, wq, Some(bq))?;
    let k = g.linear(kv_in, wk, Some(bk))?;
    let v = g.linear(kv_in, wv, Some(bv))?;
    let q = split_heads(g, q, batch, nq, h, dk)?;
    let k = split_heads(g, k, batch, nkv, h, dk)?;
    let v = split_heads(g, v, batch, nkv, h, dk)?;

    let scores = g.matmul_nt(q, k, 1.0 / (dk as f64).sqrt())?;
    let mut scores = g.reshape(scores, &[batch, h, nq, nkv])?;
    if let Some(b) = bias {
        scores = g.add_broadcast(scores, b)?;
    }
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax(scores, 3)?;
    let attn = g.reshape(attn, &[batch * h, nq, nkv])?;
    let out = g.matmul(attn, v)?;
    let out = g.permute_view(out, &[batch, h, nq, dk], &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[batch * nq, w.dim])?;
    let (wo, bo) = (g.param(w.wo), g.param(w.bo));
    g.linear(out, wo, Some(bo))
}

/// Multi-head attention of `q_tokens (n_q, d)` over `kv_tokens (n_kv, d)`.
///
/// `bias`, when given, is an additive score bias of shape `(heads, n_q, n_kv)`.
pub fn mha(
    g: &mut Graph<'_>,
    q_tokens: NodeId,
    kv_tokens: NodeId,
    w: &AttentionWeights,
    bias: Option<NodeId>,
) -> Result<NodeId> {
    attend(g, q_tokens, kv_tokens, 1, w, bias, None)
}

fn check_windows(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            divisor: m,
            what: "both map sides must be multiples of the window size",
        });
    }
    Ok(())
}

/// Source row for each windowed token: windows in row-major order, tokens
/// within a window in row-major order.
pub fn window_partition_index(h: usize, w: usize, m: usize) -> Result<Vec<usize>> {
    check_windows(h, w, m)?;
    let mut idx = Vec::with_capacity(h * w);
    for bi in 0..h / m {
        for bj in 0..w / m {
            for ti in 0..m {
                for tj in 0..m {
                    idx.push((bi * m + ti) * w + bj * m + tj);
                }
            }
        }
    }
    Ok(idx)
}

/// Source row for each token of a map cyclically rolled by `(dy, dx)`:
/// `out[i][j] = in[(i - dy) mod h][(j - dx) mod w]`.
pub fn cyclic_shift_index(h: usize, w: usize, dy: isize, dx: isize) -> Vec<usize> {
    let (hi, wi) = (h as isize, w as isize);
    let mut idx = Vec::with_capacity(h * w);
    for i in 0..hi {
        for j in 0..wi {
            let si = (i - dy).rem_euclid(hi);
            let sj = (j - dx).rem_euclid(wi);
            idx.push((si * wi + sj) as usize);
        }
    }
    idx
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Windows cut from a map: `count` windows of `size x size` tokens stacked
/// as a `(count * size^2, C)` matrix.
#[derive(Debug, Clone, Copy)]
pub struct Windows {
    pub tokens: NodeId,
    pub count: usize,
    pub size: usize,
}

pub fn window_partition(g: &mut Graph<'_>, map: &TokenMap, m: usize) -> Result<Windows> {
    if map.extra != 0 {
        return Err(Error::invalid("window_partition", "map carries non-spatial tokens"));
    }
    let idx = window_partition_index(map.height, map.width, m)?;
    let tokens = g.gather_rows(map.tokens, idx.into())?;
    Ok(Windows {
        tokens,
        count: (map.height / m) * (map.width / m),
        size: m,
    })
}

pub fn window_reverse(g: &mut Graph<'_>, windows: &Windows, height: usize, width: usize) -> Result<TokenMap> {
    let idx = window_partition_index(height, width, windows.size)?;
    if idx.len() != windows.count * windows.size * windows.size {
        return Err(Error::shape(
            "window_reverse",
            &[height, width],
            &[windows.count, windows.size],
        ));
    }
    let tokens = g.gather_rows(windows.tokens, invert(&idx).into())?;
    TokenMap::new(g, tokens, height, width)
}

pub fn cyclic_shift(g: &mut Graph<'_>, map: &TokenMap, dy: isize, dx: isize) -> Result<TokenMap> {
    if map.extra != 0 {
        return Err(Error::invalid("cyclic_shift", "map carries non-spatial tokens"));
    }
    let idx = cyclic_shift_index(map.height, map.width, dy, dx);
    let tokens = g.gather_rows(map.tokens, idx.into())?;
    Ok(map.with_tokens(tokens))
}

/// Index into the `(2M-1)^2` bias table for every (query, key) pair of a window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let side = 2 * m - 1;
    let mut idx = Vec::with_capacity(m.pow(4));
    for qi in 0..m * m {
        for ki in 0..m * m {
            let (qy, qx) = (qi / m, qi % m);
            let (ky, kx) = (ki / m, ki % m);
            let dy = qy + m - 1 - ky;
            let dx = qx + m - 1 - kx;
            idx.push(dy * side + dx);
        }
    }
    idx
}

/// Region label of every token of a map already rolled by `(-shift, -shift)`.
/// Tokens of one window may attend to each other only if labels agree.
pub fn shifted_region_labels(h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - m {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            labels.push(band(i, h) * 3 + band(j, w));
        }
    }
    labels
}

/// Additive mask `(windows, M^2, M^2)`: 0 where two tokens share a region, else [`MASK_VALUE`].
pub fn shifted_window_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<Vec<f64>> {
    let labels = shifted_region_labels(h, w, m, shift);
    let part = window_partition_index(h, w, m)?;
    let n = m * m;
    let mut mask = Vec::with_capacity(part.len() * n);
    for win in part.chunks_exact(n) {
        for &q in win {
            for &k in win {
                mask.push(if labels[q] == labels[k] { 0.0 } else { MASK_VALUE });
            }
        }
    }
    Ok(mask)
}

fn relative_bias(g: &mut Graph<'_>, w: &AttentionWeights, m: usize) -> Result<Option<NodeId>> {
    let Some((table, wm)) = w.rel_bias else {
        return Ok(None);
    };
    if wm != m {
        return Err(Error::invalid(
            "local_attention",
            format!("bias table built for window {wm}, called with {m}"),
        ));
    }
    let t = g.param(table);
    let rows = g.gather_rows(t, relative_position_index(m).into())?;
    let n = m * m;
    Ok(Some(g.permute_view(rows, &[n, n, w.heads], &[2, 0, 1])?))
}

/// Self-attention restricted to `M x M` windows, with relative position bias.
///
/// With `shifted`, the map is rolled by `floor(M/2)` before partitioning and
/// rolled back afterwards; tokens that wrapped around from opposite borders
/// are masked from each other. A map that is a single window is never shifted.
pub fn local_attention(
    g: &mut Graph<'_>,
    map: &TokenMap,
    w: &AttentionWeights,
    m: usize,
    shifted: bool,
) -> Result<TokenMap> {
    if map.extra != 0 {
        return Err(Error::invalid("local_attention", "map carries non-spatial tokens"));
    }
    let (h, wd) = (map.height, map.width);
    let part = window_partition_index(h, wd, m)?;
    let shift = if shifted && (h > m || wd > m) { m / 2 } else { 0 };

    let gather: Vec<usize> = if shift > 0 {
        let roll = cyclic_shift_index(h, wd, -(shift as isize), -(shift as isize));
        part.iter().map(|&p| roll[p]).collect()
    } else {
        part
    };
    let count = (h / m) * (wd / m);
    let windows = g.gather_rows(map.tokens, Arc::from(gather.as_slice()))?;

    let bias = relative_bias(g, w, m)?;
    let mask = if shift > 0 {
        let base = shifted_window_mask(h, wd, m, shift)?;
        let n2 = m.pow(4);
        let mut full = Vec::with_capacity(count * w.heads * n2);
        for win in base.chunks_exact(n2) {
            for _ in 0..w.heads {
                full.extend_from_slice(win);
            }
        }
        Some(g.constant(Tensor::new(vec![count, w.heads, m * m, m * m], full)?))
    } else {
        None
    };
    let out = attend(g, windows, windows, count, w, bias, mask)?;
    let back = g.gather_rows(out, invert(&gather).into())?;
    Ok(map.with_tokens(back))
}

/// Full self-attention over every token of one map (including extra tokens).
pub fn global_attention(g: &mut Graph<'_>, map: &TokenMap, w: &AttentionWeights) -> Result<TokenMap> {
    let out = attend(g, map.tokens, map.tokens, 1, w, None, None)?;
    Ok(map.with_tokens(out))
}

/// Two-way attention between streams. Each stream queries with its own
/// tokens and takes keys and values from the other stream; outputs keep
/// their own stream's layout. Returns `(template, search)`.
pub fn cross_attention(
    g: &mut Graph<'_>,
    template: &TokenMap,
    search: &TokenMap,
    weights_t: &AttentionWeights,
    weights_s: &AttentionWeights,
) -> Result<(TokenMap, TokenMap)> {
    if template.channels != search.channels {
        return Err(Error::shape(
            "cross_attention",
            &[template.channels],
            &[search.channels],
        ));
    }
    let t = attend(g, template.tokens, search.tokens, 1, weights_t, None, None)?;
    let s = attend(g, search.tokens, template.tokens, 1, weights_s, None, None)?;
    Ok((template.with_tokens(t), search.with_tokens(s)))
}
