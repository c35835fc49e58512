//! Pre-norm Vision Transformer laid out like the CLIP visual tower.
//!
//! Parameter names follow `backbone.*` (see [`backbone_shapes`]). Adapter
//! parameters live under `mole.*` and the classifier under `head.*`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mole::{self, BlockSet, MoleConfig, RoutingStats};
use crate::params::{Graph, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// `x·σ(1.702x)`, used by the released CLIP towers.
    QuickGelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInput {
    /// Final layer-normed CLS embedding (`d` inputs).
    Cls,
    /// CLS embedding after the visual projection (`proj_dim` inputs).
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    B32,
    B16,
    L14,
    Toy16,
    Toy64,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::B32, Preset::B16, Preset::L14, Preset::Toy16, Preset::Toy64];

    pub fn name(self) -> &'static str {
        match self {
            Preset::B32 => "b32",
            Preset::B16 => "b16",
            Preset::L14 => "l14",
            Preset::Toy16 => "toy-16",
            Preset::Toy64 => "toy-64",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('/', "").as_str() {
            "b32" | "vit-b32" => Ok(Preset::B32),
            "b16" | "vit-b16" => Ok(Preset::B16),
            "l14" | "vit-l14" => Ok(Preset::L14),
            "toy-16" | "toy16" => Ok(Preset::Toy16),
            "toy-64" | "toy64" => Ok(Preset::Toy64),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub proj_dim: usize,
    pub activation: Activation,
    pub head_input: HeadInput,
    pub ln_eps: f64,
}

impl ViTConfig {
    pub fn preset(p: Preset) -> Self {
        let clip = |image_size, patch_size, d: usize, depth, heads, proj_dim| ViTConfig {
            image_size,
            patch_size,
            channels: 3,
            embed_dim: d,
            depth,
            num_heads: heads,
            mlp_hidden: 4 * d,
            proj_dim,
            activation: Activation::QuickGelu,
            head_input: HeadInput::Cls,
            ln_eps: 1e-5,
        };
        let toy = |d: usize, depth| ViTConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: d,
            depth,
            num_heads: if d >= 64 { 4 } else { 2 },
            mlp_hidden: 4 * d,
            proj_dim: d,
            activation: Activation::Gelu,
            head_input: HeadInput::Cls,
            ln_eps: 1e-5,
        };
        match p {
            Preset::B32 => clip(224, 32, 768, 12, 12, 512),
            Preset::B16 => clip(224, 16, 768, 12, 12, 512),
            Preset::L14 => clip(224, 14, 1024, 24, 16, 768),
            Preset::Toy16 => toy(16, 2),
            Preset::Toy64 => toy(64, 6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_hidden == 0 {
            return bad("depth, channels and mlp width must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        match self.head_input {
            HeadInput::Cls => self.embed_dim,
            HeadInput::Projection => self.proj_dim,
        }
    }
}

pub(crate) fn block_name(i: usize, leaf: &str) -> String {
    format!("backbone.blocks.{i}.{leaf}")
}

/// Every backbone parameter name with its shape, in declaration order.
pub fn backbone_shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let mut v = vec![
        ("backbone.conv1.weight".to_string(), vec![d, cfg.channels, p, p]),
        ("backbone.class_embedding".to_string(), vec![d]),
        ("backbone.positional_embedding".to_string(), vec![cfg.num_tokens(), d]),
        ("backbone.ln_pre.weight".to_string(), vec![d]),
        ("backbone.ln_pre.bias".to_string(), vec![d]),
    ];
    for i in 0..cfg.depth {
        let b = |leaf: &str, shape: Vec<usize>| (block_name(i, leaf), shape);
        v.extend([
            b("ln_1.weight", vec![d]),
            b("ln_1.bias", vec![d]),
            b("attn.in_proj_weight", vec![3 * d, d]),
            b("attn.in_proj_bias", vec![3 * d]),
            b("attn.out_proj.weight", vec![d, d]),
            b("attn.out_proj.bias", vec![d]),
            b("ln_2.weight", vec![d]),
            b("ln_2.bias", vec![d]),
            b("mlp.c_fc.weight", vec![cfg.mlp_hidden, d]),
            b("mlp.c_fc.bias", vec![cfg.mlp_hidden]),
            b("mlp.c_proj.weight", vec![d, cfg.mlp_hidden]),
            b("mlp.c_proj.bias", vec![d]),
        ]);
    }
    v.extend([
        ("backbone.ln_post.weight".to_string(), vec![d]),
        ("backbone.ln_post.bias".to_string(), vec![d]),
        ("backbone.proj".to_string(), vec![d, cfg.proj_dim]),
    ]);
    v
}

pub fn backbone_param_count(cfg: &ViTConfig) -> usize {
    backbone_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Seeded stand-in for pretrained weights. All tensors are frozen.
pub fn init_backbone(cfg: &ViTConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in backbone_shapes(cfg) {
        let n = shape.iter().product::<usize>();
        let fan_in = *shape.last().unwrap_or(&1);
        let t = if name.ends_with("ln_pre.weight")
            || name.ends_with("ln_post.weight")
            || name.ends_with("ln_1.weight")
            || name.ends_with("ln_2.weight")
        {
            Tensor::full(shape, 1.0)
        } else if name.ends_with("bias") {
            Tensor::zeros(shape)
        } else if name == "backbone.conv1.weight" {
            Tensor::randn(shape, (1.0 / cfg.patch_dim() as f64).sqrt(), seed, &name)
        } else if name == "backbone.class_embedding" || name == "backbone.positional_embedding" {
            Tensor::randn(shape, 0.1, seed, &name)
        } else {
            Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), seed, &name)
        };
        debug_assert_eq!(t.len(), n);
        store.insert(name, t);
    }
    Ok(store)
}

/// Patch-embedding initialisation for seeded backbones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stem {
    #[default]
    Random,
    /// Rows are the orthonormal 2-D cosine basis of the channel-mean patch,
    /// lowest frequencies first; rows past `p²` stay random.
    Dct,
}

impl FromStr for Stem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(Stem::Random),
            "dct" => Ok(Stem::Dct),
            other => Err(Error::Config(format!("unknown stem `{other}`"))),
        }
    }
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stem::Random => "random",
            Stem::Dct => "dct",
        })
    }
}

/// Overwrite `backbone.conv1.weight` according to `stem`.
pub fn apply_stem(cfg: &ViTConfig, store: &mut ParamStore, stem: Stem) -> Result<()> {
    if stem == Stem::Random {
        return Ok(());
    }
    let (c, p) = (cfg.channels, cfg.patch_size);
    let mut freqs: Vec<(usize, usize)> = (0..p).flat_map(|v| (0..p).map(move |u| (u, v))).collect();
    freqs.sort_by_key(|&(u, v)| (u + v, v));
    let basis = |k: usize, x: usize| {
        let a = if k == 0 { (1.0 / p as f64).sqrt() } else { (2.0 / p as f64).sqrt() };
        a * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2 * p) as f64).cos()
    };
    let w = store.get_mut("backbone.conv1.weight")?;
    let per_row = c * p * p;
    for (row, &(u, v)) in w.data_mut().chunks_mut(per_row).zip(&freqs) {
        for ch in 0..c {
            for y in 0..p {
                for x in 0..p {
                    row[ch * p * p + y * p + x] = basis(v, y) * basis(u, x) / c as f64;
                }
            }
        }
    }
    Ok(())
}

/// Split `[C×H×W]` images into row-major patches of `C·p·p` values,
/// each flattened channel-major to match a `[d, C, p, p]` kernel.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::InvalidShape(format!(
            "patchify expects [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape(format!(
            "{h}x{w} image is not divisible into {patch}px patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let mut out = vec![0.0; gh * gw * pd];
    patchify_into(image.data(), c, h, w, patch, &mut out);
    Tensor::new(vec![gh * gw, pd], out)
}

fn patchify_into(img: &[f64], c: usize, h: usize, w: usize, patch: usize, out: &mut [f64]) {
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * pd..(gy * gw + gx + 1) * pd];
            let mut k = 0;
            for ch in 0..c {
                for py in 0..patch {
                    let src = ch * h * w + (gy * patch + py) * w + gx * patch;
                    row[k..k + patch].copy_from_slice(&img[src..src + patch]);
                    k += patch;
                }
            }
        }
    }
}

/// Result of a forward pass recorded on a [`Graph`].
pub struct ForwardVars {
    /// `[B × head_dim]` features that feed the classifier.
    pub features: Var,
    /// Per adapted block: block index, routing record and the load-balance loss node.
    pub routing: Vec<BlockRouting>,
}

pub struct BlockRouting {
    pub block: usize,
    pub stats: RoutingStats,
    pub lb_loss: Option<Var>,
    /// MLP-input node, kept for feature export.
    pub mlp_input: Var,
}

fn check_images(cfg: &ViTConfig, images: &Tensor) -> Result<usize> {
    let s = images.shape();
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != expect {
        return Err(Error::shape("vit_forward", s, &[0, expect[0], expect[1], expect[2]]));
    }
    Ok(s[0])
}

/// Token matrix `[B·T × d]` after patch embedding, CLS prepend, positional add and ln_pre.
fn embed(g: &mut Graph, cfg: &ViTConfig, images: &Tensor) -> Result<Var> {
    let batch = check_images(cfg, images)?;
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let np = cfg.num_patches();
    let pd = cfg.patch_dim();
    let mut patches = vec![0.0; batch * np * pd];
    for (img, out) in images
        .data()
        .chunks(c * s * s)
        .zip(patches.chunks_mut(np * pd))
    {
        patchify_into(img, c, s, s, p, out);
    }
    let patches = g.tape.constant(vec![batch * np, pd], patches)?;
    let kernel = g.param("backbone.conv1.weight")?;
    let kernel = g.tape.reshape(kernel, vec![cfg.embed_dim, pd])?;
    let emb = g.tape.matmul_nt(patches, kernel)?;
    let cls = g.param("backbone.class_embedding")?;
    let cls = g.tape.reshape(cls, vec![1, cfg.embed_dim])?;
    let table = g.tape.concat_rows(&[cls, emb])?;
    let t = cfg.num_tokens();
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(0).chain((0..np).map(move |j| 1 + b * np + j)))
        .collect();
    let tokens = g.tape.gather_rows(table, &order)?;
    let pos = g.param("backbone.positional_embedding")?;
    let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
    let pos = g.tape.gather_rows(pos, &pos_idx)?;
    let x = g.tape.add(tokens, pos)?;
    layer_norm(g, x, "backbone.ln_pre", cfg.ln_eps)
}

fn layer_norm(g: &mut Graph, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.tape.layer_norm(x, w, b, eps)
}

fn linear(g: &mut Graph, x: Var, weight: &str, bias: &str) -> Result<Var> {
    let w = g.param(weight)?;
    let b = g.param(bias)?;
    let y = g.tape.matmul_nt(x, w)?;
    g.tape.add_row(y, b)
}

fn activate(g: &mut Graph, cfg: &ViTConfig, x: Var) -> Var {
    match cfg.activation {
        Activation::Gelu => g.tape.gelu(x),
        Activation::QuickGelu => g.tape.quick_gelu(x),
    }
}

/// Frozen MLP sub-layer `c_proj(act(c_fc(x)))` of block `i`.
pub(crate) fn frozen_mlp(g: &mut Graph, cfg: &ViTConfig, i: usize, x: Var) -> Result<Var> {
    let h = linear(g, x, &block_name(i, "mlp.c_fc.weight"), &block_name(i, "mlp.c_fc.bias"))?;
    let h = activate(g, cfg, h);
    linear(g, h, &block_name(i, "mlp.c_proj.weight"), &block_name(i, "mlp.c_proj.bias"))
}

#[allow(clippy::too_many_arguments)]
fn block(
    g: &mut Graph,
    cfg: &ViTConfig,
    i: usize,
    x: Var,
    batch: usize,
    mole_cfg: Option<&MoleConfig>,
    adapted: bool,
    cls_only: bool,
) -> Result<(Var, Option<BlockRouting>)> {
    let msa = adapted && mole_cfg.is_some_and(|m| m.placement.adapts_msa());
    let mlp = adapted && mole_cfg.is_some_and(|m| m.placement.adapts_mlp());

    let h = layer_norm(g, x, &format!("backbone.blocks.{i}.ln_1"), cfg.ln_eps)?;
    let mut qkv = linear(
        g,
        h,
        &block_name(i, "attn.in_proj_weight"),
        &block_name(i, "attn.in_proj_bias"),
    )?;
    if msa {
        let parts = ["q", "k", "v"]
            .iter()
            .map(|p| mole::msa_lora(g, i, p, h))
            .collect::<Result<Vec<_>>>()?;
        let delta = g.tape.concat_cols(&parts)?;
        qkv = g.tape.add(qkv, delta)?;
    }
    let d = cfg.embed_dim;
    let q = g.tape.slice_cols(qkv, 0, d)?;
    let k = g.tape.slice_cols(qkv, d, d)?;
    let v = g.tape.slice_cols(qkv, 2 * d, d)?;
    let a = g.tape.attention(q, k, v, batch, cfg.num_heads)?;
    let mut o = linear(
        g,
        a,
        &block_name(i, "attn.out_proj.weight"),
        &block_name(i, "attn.out_proj.bias"),
    )?;
    if msa {
        let delta = mole::msa_lora(g, i, "out", a)?;
        o = g.tape.add(o, delta)?;
    }
    let x = g.tape.add(x, o)?;

    let h2 = layer_norm(g, x, &format!("backbone.blocks.{i}.ln_2"), cfg.ln_eps)?;
    // Past the last attention only CLS rows reach the head; routing still sees every token.
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * cfg.num_tokens()).collect();
    let (x, mlp_in) = if cls_only {
        (g.tape.gather_rows(x, &cls_rows)?, g.tape.gather_rows(h2, &cls_rows)?)
    } else {
        (x, h2)
    };
    let mut m = frozen_mlp(g, cfg, i, mlp_in)?;
    let mut routing = None;
    if mlp {
        let mc = mole_cfg.expect("checked above");
        let rows = cls_only.then_some(cls_rows.as_slice());
        let out = mole::bypass(g, mc, i, h2, cfg.num_tokens(), rows)?;
        if let Some(delta) = out.delta {
            m = g.tape.add(m, delta)?;
        }
        routing = Some(BlockRouting {
            block: i,
            stats: out.stats,
            lb_loss: out.lb_loss,
            mlp_input: h2,
        });
    }
    Ok((g.tape.add(x, m)?, routing))
}

fn has_trainable_backbone(store: &ParamStore) -> bool {
    store.with_prefix("backbone.").any(|(_, t)| t.requires_grad)
}

/// Run the frozen stem and the blocks `0..upto`, returning token activations
/// `[B·T × d]` without keeping the intermediate graph.
pub fn frozen_prefix(cfg: &ViTConfig, store: &ParamStore, images: &Tensor, upto: usize) -> Result<Tensor> {
    let batch = check_images(cfg, images)?;
    let mut g = Graph::new(store);
    let mut x = embed(&mut g, cfg, images)?;
    for i in 0..upto.min(cfg.depth) {
        x = block(&mut g, cfg, i, x, batch, None, false, false)?.0;
    }
    Ok(g.tape.to_tensor(x))
}

/// Record the forward pass on `g`. Blocks ahead of the first adapted block
/// run on a scratch tape when the backbone is frozen.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ViTConfig,
    images: &Tensor,
    mole_cfg: Option<&MoleConfig>,
) -> Result<ForwardVars> {
    cfg.validate()?;
    let batch = check_images(cfg, images)?;
    let adapted = match mole_cfg {
        Some(m) => m.blocks.resolve(cfg.depth)?,
        None => vec![],
    };
    let start = if has_trainable_backbone(g.store) {
        0
    } else {
        adapted.first().copied().unwrap_or(cfg.depth)
    };
    let x = if start == 0 {
        embed(g, cfg, images)?
    } else {
        let t = frozen_prefix(cfg, g.store, images, start)?;
        g.tape.leaf(&t)
    };
    forward_from(g, cfg, x, batch, start, mole_cfg, &adapted)
}

/// Continue a forward pass from token activations entering block `start`.
pub fn forward_from_tokens(
    g: &mut Graph,
    cfg: &ViTConfig,
    tokens: &Tensor,
    start: usize,
    mole_cfg: Option<&MoleConfig>,
) -> Result<ForwardVars> {
    let (rows, d) = tokens.dims2()?;
    if d != cfg.embed_dim || rows % cfg.num_tokens() != 0 {
        return Err(Error::shape(
            "forward_from_tokens",
            tokens.shape(),
            &[cfg.num_tokens(), cfg.embed_dim],
        ));
    }
    let adapted = match mole_cfg {
        Some(m) => m.blocks.resolve(cfg.depth)?,
        None => vec![],
    };
    if adapted.first().is_some_and(|&b| b < start) {
        return Err(Error::Config(format!(
            "cached tokens start at block {start}, after adapted block {}",
            adapted[0]
        )));
    }
    let x = g.tape.leaf(tokens);
    forward_from(g, cfg, x, rows / cfg.num_tokens(), start, mole_cfg, &adapted)
}

fn forward_from(
    g: &mut Graph,
    cfg: &ViTConfig,
    mut x: Var,
    batch: usize,
    start: usize,
    mole_cfg: Option<&MoleConfig>,
    adapted: &[usize],
) -> Result<ForwardVars> {
    let mut routing = Vec::new();
    let t = cfg.num_tokens();
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
    let mut cls = None;
    for i in start..cfg.depth {
        let last = i + 1 == cfg.depth;
        let (y, r) = block(g, cfg, i, x, batch, mole_cfg, adapted.contains(&i), last)?;
        x = y;
        routing.extend(r);
        if last {
            cls = Some(y);
        }
    }
    let cls = match cls {
        Some(c) => c,
        None => g.tape.gather_rows(x, &cls_rows)?,
    };
    let mut features = layer_norm(g, cls, "backbone.ln_post", cfg.ln_eps)?;
    if cfg.head_input == HeadInput::Projection {
        let proj = g.param("backbone.proj")?;
        features = g.tape.matmul(features, proj)?;
    }
    Ok(ForwardVars { features, routing })
}

/// Eager forward: `[B × head_dim]` features and routing stats per adapted block.
pub fn vit_forward(
    cfg: &ViTConfig,
    store: &ParamStore,
    images: &Tensor,
    mole_cfg: Option<&MoleConfig>,
) -> Result<(Tensor, Vec<RoutingStats>)> {
    let mut g = Graph::new(store);
    let out = forward_graph(&mut g, cfg, images, mole_cfg)?;
    let feats = g.tape.to_tensor(out.features);
    Ok((feats, out.routing.into_iter().map(|r| r.stats).collect()))
}

/// Parameter-count summary for one backbone/adapter combination.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableReport {
    pub trainable: usize,
    pub frozen: usize,
    /// Trainable parameters as a percentage of the frozen backbone.
    pub percentage: f64,
    /// Trainable parameters as a percentage of all parameters.
    pub share_of_total: f64,
}

pub fn count_trainable(cfg: &ViTConfig, mole_cfg: Option<&MoleConfig>) -> Result<TrainableReport> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut trainable = cfg.head_dim() + 1;
    if let Some(m) = mole_cfg {
        let blocks = m.blocks.resolve(cfg.depth)?;
        trainable += blocks.len() * m.params_per_block(d);
    }
    let frozen = backbone_param_count(cfg);
    Ok(TrainableReport {
        trainable,
        frozen,
        percentage: 100.0 * trainable as f64 / frozen as f64,
        share_of_total: 100.0 * trainable as f64 / (trainable + frozen) as f64,
    })
}

/// One count row per block set, adapters otherwise as in `base`.
pub fn param_table(cfg: &ViTConfig, base: &MoleConfig, sets: &[BlockSet]) -> Result<Vec<(String, TrainableReport)>> {
    sets.iter()
        .map(|b| {
            let m = MoleConfig {
                blocks: b.clone(),
                ..base.clone()
            };
            Ok((b.label(), count_trainable(cfg, Some(&m))?))
        })
        .collect()
}

/// Block sets listed for a preset in the count report.
pub fn reported_block_sets(p: Preset) -> Vec<BlockSet> {
    match p {
        Preset::L14 => [2, 3, 4, 6].into_iter().map(BlockSet::Last).collect(),
        _ => {
            let mut v = vec![BlockSet::None];
            v.extend((1..=5).map(BlockSet::Last));
            v.push(BlockSet::All);
            v
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let mut c = ViTConfig::preset(Preset::B32);
        assert_eq!(c.num_tokens(), 50);
        c = ViTConfig::preset(Preset::L14);
        assert_eq!(c.num_tokens(), 257);
        c = ViTConfig::preset(Preset::Toy16);
        assert_eq!(c.num_tokens(), 65);
    }

    #[test]
    fn patchify_counts_and_errors() {
        let img = Tensor::zeros(vec![3, 224, 224]);
        assert_eq!(patchify(&img, 32).unwrap().shape(), &[49, 3072]);
        assert_eq!(patchify(&img, 14).unwrap().shape(), &[256, 588]);
        assert!(patchify(&img, 30).is_err());
    }

    #[test]
    fn patchify_layout_is_channel_major() {
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let img = Tensor::new(vec![2, 4, 4], data).unwrap();
        let p = patchify(&img, 2).unwrap();
        // second patch of the top row: x∈{2,3}, y∈{0,1}
        assert_eq!(&p.data()[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn b32_backbone_count() {
        assert_eq!(backbone_param_count(&ViTConfig::preset(Preset::B32)), 87_849_216);
        assert_eq!(backbone_param_count(&ViTConfig::preset(Preset::L14)), 303_966_208);
    }

    #[test]
    fn count_examples() {
        let b32 = ViTConfig::preset(Preset::B32);
        let r = count_trainable(&b32, Some(&MoleConfig::default())).unwrap();
        assert_eq!(r.trainable, 3 * (36 * 2 * 768) + 3 * (3 * 768) + 769);
        assert_eq!(r.trainable, 173_569);
        assert!((r.percentage - 0.198).abs() < 5e-4);
        let none = MoleConfig {
            blocks: BlockSet::None,
            ..MoleConfig::default()
        };
        let r = count_trainable(&b32, Some(&none)).unwrap();
        assert_eq!(r.trainable, 769);
        assert!((r.percentage - 0.001).abs() < 5e-4);
        let l14 = ViTConfig::preset(Preset::L14);
        let r = count_trainable(&l14, Some(&MoleConfig::default())).unwrap();
        assert_eq!(r.trainable, 231_425);
        assert!((r.percentage - 0.077).abs() < 1e-3);
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = ViTConfig::preset(Preset::Toy16);
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::preset(Preset::Toy16);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }
}
