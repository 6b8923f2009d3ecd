//! Closed-form parameter and FLOP accounting.
//!
//! Counts are derived from the configuration alone, independently of the
//! model builder, so they can be checked against an instantiated model and
//! against the multiply-accumulate counter of an actual forward pass. One
//! multiply-accumulate is two FLOPs; normalization, softmax and elementwise
//! work is not counted.

use std::fmt;

use serde::Serialize;

use crate::config::{ModelConfig, MERGES};
use crate::error::{Error, Result};
use crate::flops::BlockKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Local,
    Global,
}

/// Local-attention cost as commonly printed for windowed attention:
/// `4 N C^2 + 2 (M^2)^2 C`. The second term does not depend on `N`.
pub fn flops_local_literal(n: u64, m: u64, c: u64) -> u64 {
    4 * n * c * c + 2 * (m * m).pow(2) * c
}

/// Global-attention counterpart: `4 N C^2 + 2 M^2 N C`.
pub fn flops_global_literal(n: u64, m: u64, c: u64) -> u64 {
    4 * n * c * c + 2 * m * m * n * c
}

/// Multiply-accumulates of one self-attention layer over `t` tokens of width `c`:
/// four projections plus the score and weighted-value products. Local
/// attention is linear in `t` (`4TC^2 + 2M^2TC`), global attention quadratic
/// (`4TC^2 + 2T^2C`).
pub fn flops_attention(t: u64, m: u64, c: u64, kind: AttentionKind) -> Result<u64> {
    let proj = 4 * t * c * c;
    match kind {
        AttentionKind::Local => {
            let w = m * m;
            if w == 0 || !t.is_multiple_of(w) {
                return Err(Error::invalid(
                    "flops_attention",
                    format!("{t} tokens do not split into windows of {w}"),
                ));
            }
            Ok(proj + 2 * w * t * c)
        }
        AttentionKind::Global => Ok(proj + 2 * t * t * c),
    }
}

/// Multiply-accumulates of one two-way cross-attention layer between streams
/// of `a` and `b` tokens.
pub fn cross_attention_macs(a: u64, b: u64, c: u64) -> u64 {
    // Per stream: Q and O projections over its own tokens, K and V over the
    // other stream's, then scores and weighted values.
    let one_way = |q: u64, kv: u64| 2 * q * c * c + 2 * kv * c * c + 2 * q * kv * c;
    one_way(a, b) + one_way(b, a)
}

fn mlp_macs(t: u64, c: u64, ratio: u64) -> u64 {
    2 * ratio * t * c * c
}

/// Parameter counts per module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub by_module: Vec<(&'static str, u64)>,
}

fn block_params(c: u64, heads: u64, ratio: u64, window: Option<u64>) -> u64 {
    let norms = 2 * 2 * c;
    let attn = 4 * (c * c + c);
    let table = window.map_or(0, |m| (2 * m - 1).pow(2) * heads);
    let hidden = ratio * c;
    let mlp = c * hidden + hidden + hidden * c + c;
    norms + attn + table + mlp
}

fn head_params(input: u64, hidden: u64, out: u64) -> u64 {
    input * hidden + hidden + hidden * hidden + hidden + hidden * out + out
}

pub fn count_params(config: &ModelConfig) -> ParamCount {
    let c = config.embed_dim as u64;
    let p = config.patch_size as u64;
    let m = config.window as u64;
    let embed = 3 * p * p * c + c;

    let mut lab = 0;
    let mut merge = 0;
    for i in 0..3 {
        let d = c << i;
        let h = config.heads[i] as u64;
        lab += config.lab_depths[i] as u64 * block_params(d, h, config.mlp_ratio as u64, Some(m));
        if i < MERGES {
            merge += 2 * 4 * d + 4 * d * 2 * d;
        }
    }

    let fd = c << MERGES;
    let h = config.heads[MERGES] as u64;
    let fusion = block_params(fd, h, config.fusion_mlp_ratio as u64, None);
    let tg = config.template_grid() as u64;
    let sg = config.search_grid() as u64;
    let pos = (tg * tg + sg * sg) * fd;
    let branches = if config.share_gab { 1 } else { 2 };
    let gab = config.gab_depth as u64 * branches * fusion;
    let cab = config.cab_depth as u64 * 2 * fusion;
    let hidden = config.head_hidden_dim() as u64;
    let head = head_params(2 * fd, hidden, 1) + head_params(2 * fd, hidden, 4);

    let by_module = vec![
        ("embed", embed),
        ("lab", lab),
        ("merge", merge),
        ("pos", pos),
        ("gab", gab),
        ("cab", cab),
        ("head", head),
    ];
    ParamCount {
        total: by_module.iter().map(|x| x.1).sum(),
        by_module,
    }
}

/// Multiply-accumulates and FLOPs per block kind for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub template_size: usize,
    pub search_size: usize,
    pub macs_by_kind: Vec<(BlockKind, u64)>,
    pub macs_total: u64,
}

impl FlopCount {
    pub fn macs(&self, kind: BlockKind) -> u64 {
        self.macs_by_kind.iter().find(|(k, _)| *k == kind).map_or(0, |x| x.1)
    }

    pub fn flops(&self, kind: BlockKind) -> u64 {
        2 * self.macs(kind)
    }

    pub fn flops_total(&self) -> u64 {
        2 * self.macs_total
    }
}

/// Forward-pass cost of `config` applied to a template and search image of
/// the given sides.
pub fn count_flops(config: &ModelConfig, template_size: usize, search_size: usize) -> Result<FlopCount> {
    let sized = ModelConfig {
        template_size,
        search_size,
        ..config.clone()
    };
    sized.validate()?;
    let c = config.embed_dim as u64;
    let m = config.window as u64;
    let (mut embed, mut local, mut merge, mut global) = (0, 0, 0, 0);

    for size in [template_size, search_size] {
        let side = (size / config.patch_size) as u64;
        let p = config.patch_size as u64;
        embed += side * side * 3 * p * p * c;
        for i in 0..3 {
            let (t, d) = ((side >> i).pow(2), c << i);
            let per_block = flops_attention(t, m, d, AttentionKind::Local)? + mlp_macs(t, d, config.mlp_ratio as u64);
            local += config.lab_depths[i] as u64 * per_block;
            if i < MERGES {
                let t_next = (side >> (i + 1)).pow(2);
                merge += t_next * 4 * d * 2 * d;
            }
        }
        let t = (side >> MERGES).pow(2);
        let fd = c << MERGES;
        global += config.gab_depth as u64
            * (flops_attention(t, m, fd, AttentionKind::Global)? + mlp_macs(t, fd, config.fusion_mlp_ratio as u64));
    }

    let fd = c << MERGES;
    let tt = sized.template_grid().pow(2) as u64;
    let ts = sized.search_grid().pow(2) as u64;
    let cross = config.cab_depth as u64
        * (cross_attention_macs(tt, ts, fd) + mlp_macs(tt + ts, fd, config.fusion_mlp_ratio as u64));
    let hidden = config.head_hidden_dim() as u64;
    let head = ts * (2 * (2 * fd * hidden + hidden * hidden) + hidden * 5);

    let macs_by_kind = vec![
        (BlockKind::Embed, embed),
        (BlockKind::Local, local),
        (BlockKind::Global, global),
        (BlockKind::Cross, cross),
        (BlockKind::Merge, merge),
        (BlockKind::Head, head),
    ];
    Ok(FlopCount {
        template_size,
        search_size,
        macs_total: macs_by_kind.iter().map(|x| x.1).sum(),
        macs_by_kind,
    })
}

/// Parameters and FLOPs of one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub config: ModelConfig,
    pub params: ParamCount,
    pub flops: FlopCount,
}

impl CostReport {
    /// Cost at the configuration's own input sizes.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            params: count_params(config),
            flops: count_flops(config, config.template_size, config.search_size)?,
        })
    }

    /// `(section, item, value)` rows, totals last in each section.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, u64)> {
        let mut rows: Vec<_> = self.params.by_module.iter().map(|&(m, v)| ("params", m, v)).collect();
        rows.push(("params", "total", self.params.total));
        rows.extend(
            self.flops
                .macs_by_kind
                .iter()
                .map(|&(k, v)| ("flops", k.as_str(), 2 * v)),
        );
        rows.push(("flops", "total", self.flops.flops_total()));
        rows
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "config: C={} M={} lab={:?} gab={} cab={} template={} search={}",
            c.embed_dim,
            c.window,
            c.lab_depths,
            c.gab_depth,
            c.cab_depth,
            self.flops.template_size,
            self.flops.search_size
        )?;
        writeln!(
            f,
            "parameters: {:.2} M ({})",
            self.params.total as f64 / 1e6,
            self.params.total
        )?;
        for (m, v) in &self.params.by_module {
            writeln!(f, "  {m:<8}{:>12.3} M", *v as f64 / 1e6)?;
        }
        writeln!(f, "flops: {:.2} G", self.flops.flops_total() as f64 / 1e9)?;
        for (k, v) in &self.flops.macs_by_kind {
            writeln!(f, "  {:<8}{:>12.3} G", k.as_str(), 2.0 * *v as f64 / 1e9)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_formulas() {
        assert_eq!(flops_local_literal(1, 7, 128), 65_536 + 2 * 49 * 49 * 128);
        assert_eq!(flops_local_literal(0, 7, 128), 2 * 2401 * 128);
        assert_eq!(flops_global_literal(0, 7, 128), 0);
    }

    #[test]
    fn local_needs_whole_windows() {
        assert!(flops_attention(50, 7, 8, AttentionKind::Local).is_err());
        assert!(flops_attention(50, 7, 8, AttentionKind::Global).is_ok());
    }
}
