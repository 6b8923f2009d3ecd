//! Patch embedding, transformer blocks, patch merging and the two-branch
//! feature extractor.
//!
//! Both images run through the same three local-attention stages (one
//! parameter set), separated by patch merges. At the last stage resolution
//! each branch receives a learned absolute position table and its own
//! global-attention blocks; cross-attention blocks then exchange
//! information between the two streams. The search-stream outputs of the
//! last two layers are concatenated into the `8C`-wide output features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_attention, global_attention, local_attention, AttentionWeights, TokenMap};
use crate::config::{ModelConfig, MERGES};
use crate::error::{Error, Result};
use crate::flops::BlockKind;
use crate::graph::{Graph, NodeId};
use crate::heads::{mlp_head, MlpHead, Predictions};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pixel values per patch token: a `patch x patch` RGB block.
pub fn patch_values(patch: usize) -> usize {
    patch * patch * 3
}

/// Attention variant used by a [`Block`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Local,
    LocalShifted,
    Global,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.init(format!("{prefix}.gamma"), &[dim], Init::Ones, rng)?,
            beta: store.init(format!("{prefix}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId, eps: f64) -> Result<NodeId> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, eps)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.init(format!("{prefix}.fc1.w"), &[dim, hidden], Init::TruncNormal(0.02), rng)?,
            b1: store.init(format!("{prefix}.fc1.b"), &[hidden], Init::Zeros, rng)?,
            w2: store.init(format!("{prefix}.fc2.w"), &[hidden, dim], Init::TruncNormal(0.02), rng)?,
            b2: store.init(format!("{prefix}.fc2.b"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let (w1, b1) = (g.param(self.w1), g.param(self.b1));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(self.w2), g.param(self.b2));
        g.linear(h, w2, Some(b2))
    }
}

/// Pre-norm transformer block: attention and MLP, each with a residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: Norm,
    pub attn: AttentionWeights,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        window: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::register(store, rng, &format!("{prefix}.norm1"), dim)?,
            attn: AttentionWeights::register(store, rng, &format!("{prefix}.attn"), dim, heads, window)?,
            norm2: Norm::register(store, rng, &format!("{prefix}.norm2"), dim)?,
            mlp: Mlp::register(store, rng, &format!("{prefix}.mlp"), dim, mlp_ratio * dim)?,
        })
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: NodeId, eps: f64) -> Result<NodeId> {
        let n = self.norm2.apply(g, x, eps)?;
        let m = self.mlp.apply(g, n)?;
        g.add(x, m)
    }
}

/// `X' = Y + MLP(LN(Y))` with `Y = X + Attn(LN(X))`.
pub fn transformer_block(
    g: &mut Graph<'_>,
    map: &TokenMap,
    block: &Block,
    kind: AttnKind,
    window: usize,
    eps: f64,
) -> Result<TokenMap> {
    let normed = block.norm1.apply(g, map.tokens, eps)?;
    let nmap = TokenMap { tokens: normed, ..*map };
    let attn = match kind {
        AttnKind::Local => local_attention(g, &nmap, &block.attn, window, false)?,
        AttnKind::LocalShifted => local_attention(g, &nmap, &block.attn, window, true)?,
        AttnKind::Global => global_attention(g, &nmap, &block.attn)?,
    };
    let y = g.add(map.tokens, attn.tokens)?;
    let out = block.feed_forward(g, y, eps)?;
    Ok(TokenMap { tokens: out, ..*map })
}

/// One cross-attention layer: a full block per stream whose attention
/// queries its own stream and reads keys/values from the other.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub template: Block,
    pub search: Block,
}

pub fn cross_block(
    g: &mut Graph<'_>,
    template: &TokenMap,
    search: &TokenMap,
    block: &CrossBlock,
    eps: f64,
) -> Result<(TokenMap, TokenMap)> {
    let nt = block.template.norm1.apply(g, template.tokens, eps)?;
    let ns = block.search.norm1.apply(g, search.tokens, eps)?;
    let (at, as_) = cross_attention(
        g,
        &TokenMap {
            tokens: nt,
            ..*template
        },
        &TokenMap { tokens: ns, ..*search },
        &block.template.attn,
        &block.search.attn,
    )?;
    let t = g.add(template.tokens, at.tokens)?;
    let s = g.add(search.tokens, as_.tokens)?;
    let t = block.template.feed_forward(g, t, eps)?;
    let s = block.search.feed_forward(g, s, eps)?;
    Ok((TokenMap { tokens: t, ..*template }, TokenMap { tokens: s, ..*search }))
}

/// Row order that regroups an `(H, W, 3)` image into patch-major pixel rows.
fn patch_index(h: usize, w: usize, p: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h / p {
        for c in 0..w / p {
            for py in 0..p {
                for px in 0..p {
                    idx.push((r * p + py) * w + c * p + px);
                }
            }
        }
    }
    idx
}

/// Splits an `(H, W, 3)` image into `patch x patch` blocks and projects each
/// flattened block (row, column, channel order) to `C` channels.
pub fn patch_embed(g: &mut Graph<'_>, image: NodeId, patch: usize, w: ParamId, b: ParamId) -> Result<TokenMap> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape("patch_embed", &shape, &[0, 0, 3]));
    }
    let (h, wd) = (shape[0], shape[1]);
    if patch == 0 || h % patch != 0 || wd % patch != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: wd,
            divisor: patch,
            what: "image sides must be multiples of the patch size",
        });
    }
    let pixels = g.reshape(image, &[h * wd, 3])?;
    let rows = g.gather_rows(pixels, patch_index(h, wd, patch).into())?;
    let (gh, gw) = (h / patch, wd / patch);
    let flat = g.reshape(rows, &[gh * gw, patch_values(patch)])?;
    let (w, b) = (g.param(w), g.param(b));
    let tokens = g.linear(flat, w, Some(b))?;
    TokenMap::new(g, tokens, gh, gw)
}

#[derive(Debug, Clone, Copy)]
pub struct Merge {
    pub norm: Norm,
    pub w: ParamId,
}

/// Row order gathering each 2x2 neighborhood as `(2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)`.
fn merge_index(h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                idx.push((2 * i + di) * w + 2 * j + dj);
            }
        }
    }
    idx
}

/// Halves the grid and doubles the width: concatenates each 2x2 neighborhood,
/// normalizes, and projects `4C -> 2C` without bias.
pub fn patch_merge(g: &mut Graph<'_>, map: &TokenMap, merge: &Merge, eps: f64) -> Result<TokenMap> {
    if map.extra != 0 {
        return Err(Error::invalid("patch_merge", "map carries non-spatial tokens"));
    }
    let (h, w, c) = (map.height, map.width, map.channels);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            divisor: 2,
            what: "patch merging needs even map sides",
        });
    }
    let rows = g.gather_rows(map.tokens, merge_index(h, w).into())?;
    let grouped = g.reshape(rows, &[h * w / 4, 4 * c])?;
    let normed = merge.norm.apply(g, grouped, eps)?;
    let wp = g.param(merge.w);
    let tokens = g.linear(normed, wp, None)?;
    TokenMap::new(g, tokens, h / 2, w / 2)
}

/// Graph nodes produced by [`Twinformer::forward_features`].
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// `(search_grid^2, 8C)` concatenation of the last two search-stream layers.
    pub f_out: NodeId,
    /// Outputs of the shared local stages, before position embedding.
    pub template_local: TokenMap,
    pub search_local: TokenMap,
    /// Template stream entering the first cross block (after the global blocks).
    pub template_pre_cross: TokenMap,
    /// Search stream entering the first cross block.
    pub search_pre_cross: TokenMap,
    /// `(1, 4C)` mean of the search tokens after the local stages; the
    /// context token handed to the next frame in spatio-temporal mode.
    pub search_context: NodeId,
    /// Template stream after the last layer.
    pub template_out: TokenMap,
}

/// The two-branch tracker network: shared local stages, per-branch global
/// blocks, cross blocks and the two prediction heads.
#[derive(Debug, Clone)]
pub struct Twinformer {
    config: ModelConfig,
    params: ParamStore,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub stages: [Vec<Block>; 3],
    pub merges: Vec<Merge>,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub gab_template: Vec<Block>,
    pub gab_search: Vec<Block>,
    pub cab: Vec<CrossBlock>,
    pub cls_head: MlpHead,
    pub reg_head: MlpHead,
}

impl Twinformer {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let s = &mut store;
        let c = &config;

        let embed_w = s.init(
            "embed.w",
            &[patch_values(c.patch_size), c.embed_dim],
            Init::TruncNormal(0.02),
            rng,
        )?;
        let embed_b = s.init("embed.b", &[c.embed_dim], Init::Zeros, rng)?;

        let mut stages: [Vec<Block>; 3] = Default::default();
        let mut merges = Vec::with_capacity(MERGES);
        for (i, stage) in stages.iter_mut().enumerate() {
            let dim = c.stage_dim(i);
            for j in 0..c.lab_depths[i] {
                stage.push(Block::register(
                    s,
                    rng,
                    &format!("lab.stage{i}.block{j}"),
                    dim,
                    c.heads[i],
                    c.mlp_ratio,
                    Some(c.window),
                )?);
            }
            if i < MERGES {
                let norm = Norm::register(s, rng, &format!("merge{i}.norm"), 4 * dim)?;
                let w = s.init(format!("merge{i}.w"), &[4 * dim, 2 * dim], Init::TruncNormal(0.02), rng)?;
                merges.push(Merge { norm, w });
            }
        }

        let fd = c.fusion_dim();
        let heads = c.heads[MERGES];
        let (tg, sg) = (c.template_grid(), c.search_grid());
        let pos_template = s.init("pos.template", &[tg * tg, fd], Init::TruncNormal(0.02), rng)?;
        let pos_search = s.init("pos.search", &[sg * sg, fd], Init::TruncNormal(0.02), rng)?;

        let gab = |s: &mut ParamStore, rng: &mut ChaCha8Rng, branch: &str| -> Result<Vec<Block>> {
            (0..c.gab_depth)
                .map(|j| {
                    Block::register(
                        s,
                        rng,
                        &format!("gab.{branch}.block{j}"),
                        fd,
                        heads,
                        c.fusion_mlp_ratio,
                        None,
                    )
                })
                .collect()
        };
        let (gab_template, gab_search) = if c.share_gab {
            let shared = gab(s, rng, "shared")?;
            (shared.clone(), shared)
        } else {
            (gab(s, rng, "template")?, gab(s, rng, "search")?)
        };

        let mut cab = Vec::with_capacity(c.cab_depth);
        for j in 0..c.cab_depth {
            let mut half = |branch: &str| {
                Block::register(
                    s,
                    rng,
                    &format!("cab.block{j}.{branch}"),
                    fd,
                    heads,
                    c.fusion_mlp_ratio,
                    None,
                )
            };
            let template = half("template")?;
            let search = half("search")?;
            cab.push(CrossBlock { template, search });
        }

        let hidden = c.head_hidden_dim();
        let cls_head = MlpHead::register(s, rng, "head.cls", c.feature_dim(), hidden, 1)?;
        let reg_head = MlpHead::register(s, rng, "head.reg", c.feature_dim(), hidden, 4)?;

        Ok(Self {
            config,
            params: store,
            embed_w,
            embed_b,
            stages,
            merges,
            pos_template,
            pos_search,
            gab_template,
            gab_search,
            cab,
            cls_head,
            reg_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Attention variant of every local block, per stage: unshifted first,
    /// then alternating.
    pub fn lab_kinds(&self) -> Vec<Vec<AttnKind>> {
        self.stages
            .iter()
            .map(|stage| {
                (0..stage.len())
                    .map(|j| {
                        if j % 2 == 0 {
                            AttnKind::Local
                        } else {
                            AttnKind::LocalShifted
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn check_image(&self, t: &Tensor, size: usize, what: &'static str) -> Result<()> {
        if t.shape() != [size, size, 3] {
            return Err(Error::shape(what, t.shape(), &[size, size, 3]));
        }
        Ok(())
    }

    /// Shared local stages: embed, then blocks alternating unshifted/shifted
    /// windows, with a patch merge after the first two stages.
    ///
    /// `layers` collects the outputs at the last stage width.
    fn local_stages(&self, g: &mut Graph<'_>, image: NodeId, layers: &mut Vec<NodeId>) -> Result<TokenMap> {
        let c = &self.config;
        let mut map = g.scoped(BlockKind::Embed, |g| {
            patch_embed(g, image, c.patch_size, self.embed_w, self.embed_b)
        })?;
        for (i, (stage, kinds)) in self.stages.iter().zip(self.lab_kinds()).enumerate() {
            for (block, kind) in stage.iter().zip(kinds) {
                map = g.scoped(BlockKind::Local, |g| {
                    transformer_block(g, &map, block, kind, c.window, c.ln_eps)
                })?;
                if i == MERGES {
                    layers.push(map.tokens);
                }
            }
            if i < MERGES {
                map = g.scoped(BlockKind::Merge, |g| patch_merge(g, &map, &self.merges[i], c.ln_eps))?;
                if i + 1 == MERGES {
                    layers.push(map.tokens);
                }
            }
        }
        Ok(map)
    }

    /// Runs both branches and the fusion layers.
    ///
    /// `context`, when given, is a `(1, 4C)` token appended to the template
    /// stream at the entry of the global blocks.
    pub fn forward_features(
        &self,
        g: &mut Graph<'_>,
        template: &Tensor,
        search: &Tensor,
        context: Option<&Tensor>,
    ) -> Result<Features> {
        let c = &self.config;
        self.check_image(template, c.template_size, "template image")?;
        self.check_image(search, c.search_size, "search image")?;
        let fd = c.fusion_dim();

        let t_img = g.input(template.clone());
        let s_img = g.input(search.clone());
        let mut t_layers = Vec::new();
        let mut layers = Vec::new();
        let t_map = self.local_stages(g, t_img, &mut t_layers)?;
        let s_map = self.local_stages(g, s_img, &mut layers)?;
        let search_context = g.mean_rows(s_map.tokens);
        let (template_local, search_local) = (t_map, s_map);

        let pt = g.param(self.pos_template);
        let ps = g.param(self.pos_search);
        let t_tokens = g.add(t_map.tokens, pt)?;
        let s_tokens = g.add(s_map.tokens, ps)?;
        let mut t_map = TokenMap {
            tokens: t_tokens,
            ..t_map
        };
        let mut s_map = TokenMap {
            tokens: s_tokens,
            ..s_map
        };
        if let Some(ctx) = context {
            if ctx.shape() != [1, fd] {
                return Err(Error::shape("context token", ctx.shape(), &[1, fd]));
            }
            let ctx = g.input(ctx.clone());
            let tokens = g.concat(&[t_map.tokens, ctx], 0)?;
            t_map = TokenMap {
                tokens,
                extra: t_map.extra + 1,
                ..t_map
            };
        }

        for (bt, bs) in self.gab_template.iter().zip(&self.gab_search) {
            g.scoped(BlockKind::Global, |g| -> Result<()> {
                t_map = transformer_block(g, &t_map, bt, AttnKind::Global, c.window, c.ln_eps)?;
                s_map = transformer_block(g, &s_map, bs, AttnKind::Global, c.window, c.ln_eps)?;
                Ok(())
            })?;
            layers.push(s_map.tokens);
        }
        let (template_pre_cross, search_pre_cross) = (t_map, s_map);

        for block in &self.cab {
            (t_map, s_map) = g.scoped(BlockKind::Cross, |g| cross_block(g, &t_map, &s_map, block, c.ln_eps))?;
            layers.push(s_map.tokens);
        }

        let last_two = &layers[layers.len() - 2..];
        let f_out = g.concat(last_two, 1)?;
        Ok(Features {
            f_out,
            template_local,
            search_local,
            template_pre_cross,
            search_pre_cross,
            search_context,
            template_out: t_map,
        })
    }

    /// Features followed by the prediction heads.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        template: &Tensor,
        search: &Tensor,
        context: Option<&Tensor>,
    ) -> Result<(Features, Predictions)> {
        let features = self.forward_features(g, template, search, context)?;
        let grid = self.config.search_grid();
        let preds = g.scoped(BlockKind::Head, |g| {
            mlp_head(g, features.f_out, grid, &self.cls_head, &self.reg_head)
        })?;
        Ok((features, preds))
    }

    /// Every parameter id, each listed once even when blocks share weights.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    /// Overwrites this model's parameters with `store`'s, matching by name.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.get(id).name.clone();
            let src = store.by_name(&name)?;
            let dst = self.params.tensor(id);
            if src.tensor.shape() != dst.shape() {
                return Err(Error::shape("load_params", src.tensor.shape(), dst.shape()));
            }
            self.params.set_data(id, src.tensor.data())?;
        }
        Ok(())
    }
}
