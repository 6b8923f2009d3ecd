//! Architecture hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of patch-merging layers between the three local-attention stages.
pub const MERGES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square pixel patches turned into tokens.
    pub patch_size: usize,
    /// Channel width `C` of the first stage; later stages use `2C` and `4C`.
    pub embed_dim: usize,
    /// Local attention window side `M`.
    pub window: usize,
    /// Local-attention blocks in each of the three stages.
    pub lab_depths: [usize; 3],
    /// Global-attention blocks per branch.
    pub gab_depth: usize,
    /// Cross-attention blocks.
    pub cab_depth: usize,
    /// Attention heads in each stage; global and cross blocks use the last entry.
    pub heads: [usize; 3],
    /// Hidden width multiplier of the MLP inside local-attention blocks.
    pub mlp_ratio: usize,
    /// Hidden width multiplier of the MLP inside global and cross blocks.
    pub fusion_mlp_ratio: usize,
    /// Reuse one set of global-attention blocks for both branches.
    pub share_gab: bool,
    /// Hidden width of the prediction heads; `None` means the feature width `8C`.
    pub head_hidden: Option<usize>,
    /// Range of the predicted center offset, in output cells, around each token center.
    pub offset_cells: f64,
    pub ln_eps: f64,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 128,
            window: 7,
            lab_depths: [2, 2, 6],
            gab_depth: 4,
            cab_depth: 4,
            heads: [4, 8, 16],
            mlp_ratio: 2,
            fusion_mlp_ratio: 1,
            share_gab: false,
            head_hidden: None,
            offset_cells: 1.0,
            ln_eps: 1e-5,
            template_size: 112,
            search_size: 224,
        }
    }
}

impl ModelConfig {
    /// A model small enough to train on one CPU core in minutes.
    pub fn toy() -> Self {
        Self {
            embed_dim: 16,
            window: 2,
            lab_depths: [2, 2, 2],
            gab_depth: 1,
            cab_depth: 1,
            heads: [1, 2, 2],
            mlp_ratio: 2,
            fusion_mlp_ratio: 2,
            head_hidden: Some(64),
            offset_cells: 2.0,
            template_size: 32,
            search_size: 64,
            ..Self::default()
        }
    }

    /// Channel width of stage `i` (0-based).
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Width of the tokens entering the global and cross blocks (`4C`).
    pub fn fusion_dim(&self) -> usize {
        self.stage_dim(MERGES)
    }

    /// Width of the concatenated output features (`8C`).
    pub fn feature_dim(&self) -> usize {
        2 * self.fusion_dim()
    }

    pub fn head_hidden_dim(&self) -> usize {
        self.head_hidden.unwrap_or(self.feature_dim())
    }

    /// Token grid side of stage `i` for an input image of side `size`.
    pub fn stage_grid(&self, size: usize, i: usize) -> usize {
        (size / self.patch_size) >> i
    }

    pub fn template_grid(&self) -> usize {
        self.stage_grid(self.template_size, MERGES)
    }

    /// Side of the output prediction grid.
    pub fn search_grid(&self) -> usize {
        self.stage_grid(self.search_size, MERGES)
    }

    /// Input images are downsampled by this factor to the output grid.
    pub fn stride(&self) -> usize {
        self.patch_size << MERGES
    }

    /// Channel width of the search-stream features that feed the context token.
    pub fn context_dim(&self) -> usize {
        self.fusion_dim()
    }

    pub fn total_blocks(&self) -> usize {
        self.lab_depths.iter().sum::<usize>() + self.gab_depth + self.cab_depth
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.embed_dim == 0 || self.window == 0 {
            return fail("patch_size, embed_dim and window must be positive".into());
        }
        if self.mlp_ratio == 0 || self.fusion_mlp_ratio == 0 {
            return fail("MLP ratios must be at least 1".into());
        }
        if self.head_hidden == Some(0) {
            return fail("head_hidden must be positive".into());
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let dim = self.stage_dim(i);
            if h == 0 || !dim.is_multiple_of(h) {
                return fail(format!("stage {i}: {h} heads do not divide channel width {dim}"));
            }
        }
        for (name, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % self.stride() != 0 {
                return fail(format!(
                    "{name} {size} is not a multiple of the stride {}",
                    self.stride()
                ));
            }
            for (i, &depth) in self.lab_depths.iter().enumerate() {
                let grid = self.stage_grid(size, i);
                if depth > 0 && !grid.is_multiple_of(self.window) {
                    return fail(format!(
                        "{name} {size}: stage {i} grid {grid} is not a multiple of window {}",
                        self.window
                    ));
                }
            }
        }
        if self.lab_depths[MERGES] + self.gab_depth + self.cab_depth == 0 {
            return fail("the last stage needs at least one block to form output features".into());
        }
        if !(self.offset_cells.is_finite() && self.offset_cells > 0.0) {
            return fail(format!("offset_cells must be positive, got {}", self.offset_cells));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps >= 0.0) {
            return fail(format!("ln_eps must be non-negative, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stride(), 16);
        assert_eq!(c.search_grid(), 14);
        assert_eq!(c.template_grid(), 7);
        assert_eq!(c.stage_grid(224, 0), 56);
        assert_eq!(c.feature_dim(), 1024);
        assert_eq!(c.total_blocks(), 18);
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn rejects_bad_sizes_and_heads() {
        let c = ModelConfig {
            search_size: 200,
            ..ModelConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("stride"));
        let c = ModelConfig {
            heads: [3, 8, 16],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            window: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ModelConfig::toy();
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ModelConfig::from_toml("gab_depth = 0\n").unwrap();
        assert_eq!(partial.gab_depth, 0);
        assert_eq!(partial.embed_dim, 128);
        assert!(ModelConfig::from_toml("gab_dept = 0\n").is_err());
    }
}
