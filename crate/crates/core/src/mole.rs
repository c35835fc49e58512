//! Mixture of low-rank experts.
//!
//! Each adapted block gets a bypass from the MLP input `x` to the MLP output:
//!
//! ```text
//! Δ(x) = (α/r)·B·A·x + G_k(x)·(α_k/r_k)·B_k·A_k·x,   k = argmax softmax(W_g·x)
//! ```
//!
//! one always-on shared expert plus one routed expert per token. The routed
//! expert's output is weighted by its gate probability so the router is
//! trained by the task loss as well as by the load-balancing term
//! `N·Σ_j f_j·P_j`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::vit::ViTConfig;

/// Which transformer blocks receive adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockSet {
    None,
    Last(usize),
    All,
    List(Vec<usize>),
}

impl BlockSet {
    /// Sorted, de-duplicated block indices for a backbone of `depth` blocks.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let mut v = match self {
            BlockSet::None => vec![],
            BlockSet::Last(n) => {
                if *n > depth {
                    return Err(Error::Config(format!(
                        "cannot adapt the last {n} of {depth} blocks"
                    )));
                }
                (depth - n..depth).collect()
            }
            BlockSet::All => (0..depth).collect(),
            BlockSet::List(l) => {
                if let Some(&bad) = l.iter().find(|&&b| b >= depth) {
                    return Err(Error::Config(format!(
                        "adapter block index {bad} >= depth {depth}"
                    )));
                }
                l.clone()
            }
        };
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }

    pub fn label(&self) -> String {
        match self {
            BlockSet::None => "none".into(),
            BlockSet::Last(n) => format!("last{n}"),
            BlockSet::All => "all".into(),
            BlockSet::List(l) => l
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

impl FromStr for BlockSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" || s.is_empty() {
            return Ok(BlockSet::None);
        }
        if s == "all" {
            return Ok(BlockSet::All);
        }
        if let Some(n) = s.strip_prefix("last") {
            return n
                .trim_start_matches(['-', '_'])
                .parse()
                .map(BlockSet::Last)
                .map_err(|_| Error::Parse(format!("bad block set `{s}`")));
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(BlockSet::List)
            .map_err(|_| Error::Parse(format!("bad block set `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Mlp,
    Msa,
    Both,
}

impl Placement {
    pub fn adapts_mlp(self) -> bool {
        matches!(self, Placement::Mlp | Placement::Both)
    }

    pub fn adapts_msa(self) -> bool {
        matches!(self, Placement::Msa | Placement::Both)
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" => Ok(Placement::Mlp),
            "msa" => Ok(Placement::Msa),
            "both" | "msa+mlp" => Ok(Placement::Both),
            other => Err(Error::Parse(format!("unknown placement `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Routed expert output scaled by its softmax probability.
    Weighted,
    /// Switch-style: routed expert output added unscaled; the gate only
    /// enters through the load-balancing loss.
    Unweighted,
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weighted" => Ok(GateMode::Weighted),
            "unweighted" => Ok(GateMode::Unweighted),
            other => Err(Error::Parse(format!("unknown gate mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoleConfig {
    pub blocks: BlockSet,
    pub shared_rank: usize,
    /// `None` means α = r.
    pub shared_alpha: Option<f64>,
    pub expert_ranks: Vec<usize>,
    pub expert_alphas: Option<Vec<f64>>,
    pub use_shared: bool,
    pub use_separate: bool,
    pub placement: Placement,
    pub msa_rank: usize,
    pub lambda: f64,
    pub route_cls: bool,
    pub gate: GateMode,
}

impl Default for MoleConfig {
    fn default() -> Self {
        MoleConfig {
            blocks: BlockSet::Last(3),
            shared_rank: 8,
            shared_alpha: None,
            expert_ranks: vec![4, 8, 16],
            expert_alphas: None,
            use_shared: true,
            use_separate: true,
            placement: Placement::Mlp,
            msa_rank: 8,
            lambda: 0.01,
            route_cls: true,
            gate: GateMode::Weighted,
        }
    }
}

impl MoleConfig {
    pub fn num_experts(&self) -> usize {
        if self.use_separate {
            self.expert_ranks.len()
        } else {
            0
        }
    }

    pub fn shared_scale(&self) -> f64 {
        self.shared_alpha.unwrap_or(self.shared_rank as f64) / self.shared_rank as f64
    }

    pub fn expert_scale(&self, j: usize) -> f64 {
        let r = self.expert_ranks[j] as f64;
        self.expert_alphas
            .as_ref()
            .and_then(|a| a.get(j).copied())
            .unwrap_or(r)
            / r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lambda < 0.0 {
            return bad("load-balance coefficient must be non-negative");
        }
        if self.placement.adapts_mlp() && !self.use_shared && !self.use_separate {
            return bad("MLP placement needs the shared expert, the separate experts, or both");
        }
        if self.use_shared && self.shared_rank == 0 {
            return bad("shared rank must be positive");
        }
        if self.use_separate && (self.expert_ranks.is_empty() || self.expert_ranks.contains(&0)) {
            return bad("separate experts need at least one positive rank");
        }
        if let Some(a) = &self.expert_alphas {
            if a.len() != self.expert_ranks.len() {
                return bad("one scale per separate expert");
            }
        }
        if self.placement.adapts_msa() && self.msa_rank == 0 {
            return bad("attention adapter rank must be positive");
        }
        Ok(())
    }

    /// Trainable adapter parameters added to one block of width `d`.
    pub fn params_per_block(&self, d: usize) -> usize {
        let mut n = 0;
        if self.placement.adapts_mlp() {
            if self.use_shared {
                n += 2 * self.shared_rank * d;
            }
            if self.use_separate {
                n += self.expert_ranks.iter().map(|r| 2 * r * d).sum::<usize>();
                n += self.expert_ranks.len() * d;
            }
        }
        if self.placement.adapts_msa() {
            n += 4 * 2 * self.msa_rank * d;
        }
        n
    }
}

pub fn param_name(block: usize, leaf: &str) -> String {
    format!("mole.block{block}.{leaf}")
}

/// Insert freshly initialised adapter and head parameters (all trainable):
/// `A ~ N(0, 1/d)`, `B = 0`, `W_g = 0`.
pub fn init_adapters(store: &mut ParamStore, vit: &ViTConfig, cfg: &MoleConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let d = vit.embed_dim;
    let a_std = (1.0 / d as f64).sqrt();
    let mut put = |name: String, t: Tensor| store.insert(name, t.tracked());
    for b in cfg.blocks.resolve(vit.depth)? {
        if cfg.placement.adapts_mlp() {
            if cfg.use_shared {
                let r = cfg.shared_rank;
                let a = param_name(b, "shared.A");
                put(a.clone(), Tensor::randn(vec![r, d], a_std, seed, &a));
                put(param_name(b, "shared.B"), Tensor::zeros(vec![d, r]));
            }
            if cfg.use_separate {
                for (j, &r) in cfg.expert_ranks.iter().enumerate() {
                    let a = param_name(b, &format!("expert{j}.A"));
                    put(a.clone(), Tensor::randn(vec![r, d], a_std, seed, &a));
                    put(param_name(b, &format!("expert{j}.B")), Tensor::zeros(vec![d, r]));
                }
                put(
                    param_name(b, "router.W"),
                    Tensor::zeros(vec![cfg.expert_ranks.len(), d]),
                );
            }
        }
        if cfg.placement.adapts_msa() {
            for part in ["q", "k", "v", "out"] {
                let r = cfg.msa_rank;
                let a = param_name(b, &format!("msa.{part}.A"));
                put(a.clone(), Tensor::randn(vec![r, d], a_std, seed, &a));
                put(param_name(b, &format!("msa.{part}.B")), Tensor::zeros(vec![d, r]));
            }
        }
    }
    let hd = vit.head_dim();
    put(
        "head.weight".into(),
        Tensor::randn(vec![1, hd], (1.0 / hd as f64).sqrt(), seed, "head.weight"),
    );
    put("head.bias".into(), Tensor::zeros(vec![1]));
    Ok(())
}

/// `scale · x·Aᵀ·Bᵀ` for named `A` `[r×d]` and `B` `[d×r]`.
fn lora(g: &mut Graph, x: Var, a: &str, b: &str, scale: f64) -> Result<Var> {
    let a = g.param(a)?;
    let b = g.param(b)?;
    let xa = g.tape.matmul_nt(x, a)?;
    let y = g.tape.matmul_nt(xa, b)?;
    Ok(g.tape.scale(y, scale))
}

/// Attention-projection adapter for `part ∈ {q, k, v, out}`.
pub(crate) fn msa_lora(g: &mut Graph, block: usize, part: &str, x: Var) -> Result<Var> {
    lora(
        g,
        x,
        &param_name(block, &format!("msa.{part}.A")),
        &param_name(block, &format!("msa.{part}.B")),
        1.0,
    )
}

/// Per-layer dispatch record for one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    /// Fraction of routed tokens sent to each expert.
    pub f: Vec<f64>,
    /// Mean gate probability of each expert over routed tokens.
    pub p: Vec<f64>,
    pub tokens: usize,
    /// Selected expert per routed token.
    pub assignments: Vec<usize>,
    /// Gate probability of the selected expert per routed token.
    pub gates: Vec<f64>,
}

impl RoutingStats {
    pub fn from_probs(probs: &[f64], n: usize) -> Self {
        let tokens = probs.len().checked_div(n).unwrap_or(0);
        let mut f = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut assignments = Vec::with_capacity(tokens);
        let mut gates = Vec::with_capacity(tokens);
        for row in probs.chunks(n.max(1)).take(tokens) {
            let (k, g) = argmax(row);
            assignments.push(k);
            gates.push(g);
            f[k] += 1.0;
            p.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
        }
        if tokens > 0 {
            let t = tokens as f64;
            f.iter_mut().for_each(|v| *v /= t);
            p.iter_mut().for_each(|v| *v /= t);
        }
        RoutingStats {
            f,
            p,
            tokens,
            assignments,
            gates,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.f.len()
    }

    pub fn max_fraction(&self) -> f64 {
        self.f.iter().cloned().fold(0.0, f64::max)
    }
}

/// Index and value of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

pub(crate) struct BypassOut {
    pub delta: Option<Var>,
    pub stats: RoutingStats,
    pub lb_loss: Option<Var>,
}

/// Record the MoLE bypass of `block` for MLP inputs `x` `[rows × d]`.
/// Every row is routed; with `outputs = Some(rows)` the bypass is only
/// evaluated for those rows and `delta` has one row per entry.
pub(crate) fn bypass(
    g: &mut Graph,
    cfg: &MoleConfig,
    block: usize,
    x: Var,
    tokens_per_image: usize,
    outputs: Option<&[usize]>,
) -> Result<BypassOut> {
    let rows = g.tape.shape(x)[0];
    let out_rows: Vec<usize> = match outputs {
        Some(r) => r.to_vec(),
        None => (0..rows).collect(),
    };
    let xo = match outputs {
        Some(r) => g.tape.gather_rows(x, r)?,
        None => x,
    };
    let mut parts = Vec::new();
    if cfg.use_shared {
        parts.push(lora(
            g,
            xo,
            &param_name(block, "shared.A"),
            &param_name(block, "shared.B"),
            cfg.shared_scale(),
        )?);
    }
    let mut stats = RoutingStats::default();
    let mut lb_loss = None;
    if cfg.use_separate {
        let n = cfg.expert_ranks.len();
        let w = g.param(&param_name(block, "router.W"))?;
        let logits = g.tape.matmul_nt(x, w)?;
        let probs = g.tape.softmax(logits, 1)?;
        let routed: Vec<usize> = (0..rows)
            .filter(|r| cfg.route_cls || r % tokens_per_image != 0)
            .collect();
        let all_routed = routed.len() == rows;
        let gate_rows = if all_routed {
            probs
        } else {
            g.tape.gather_rows(probs, &routed)?
        };
        stats = RoutingStats::from_probs(g.tape.value(gate_rows), n);
        if stats.tokens == 0 {
            return Err(Error::Contract("no tokens to route".into()));
        }

        let mut selected = vec![usize::MAX; rows];
        for (&r, &k) in routed.iter().zip(&stats.assignments) {
            selected[r] = k;
        }
        let probs_out = match outputs {
            Some(r) => g.tape.gather_rows(probs, r)?,
            None => probs,
        };
        for j in 0..n {
            let mask: Vec<f64> = out_rows.iter().map(|&r| (selected[r] == j) as u8 as f64).collect();
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let out = lora(
                g,
                xo,
                &param_name(block, &format!("expert{j}.A")),
                &param_name(block, &format!("expert{j}.B")),
                cfg.expert_scale(j),
            )?;
            let weight = match cfg.gate {
                GateMode::Weighted => {
                    let col = g.tape.slice_cols(probs_out, j, 1)?;
                    g.tape.mul_const(col, mask)?
                }
                GateMode::Unweighted => g.tape.constant(vec![out_rows.len(), 1], mask)?,
            };
            parts.push(g.tape.mul_col(out, weight)?);
        }

        let mean_gate = g.tape.mean_axis(gate_rows, 0)?;
        let coeff: Vec<f64> = stats.f.iter().map(|f| f * n as f64).collect();
        let weighted = g.tape.mul_const(mean_gate, coeff)?;
        lb_loss = Some(g.tape.sum(weighted));
    }
    let mut delta = None;
    for p in parts {
        delta = Some(match delta {
            None => p,
            Some(acc) => g.tape.add(acc, p)?,
        });
    }
    Ok(BypassOut {
        delta,
        stats,
        lb_loss,
    })
}

/// `N · Σ_j f_j · P_j`.
pub fn load_balance_loss(stats: &RoutingStats, n: usize) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(Error::Contract("load balance over zero tokens".into()));
    }
    if stats.f.len() != n || stats.p.len() != n {
        return Err(Error::Contract(format!(
            "stats cover {} experts, expected {n}",
            stats.f.len()
        )));
    }
    Ok(n as f64 * stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum::<f64>())
}

/// `bce + λ · Σ lb`.
pub fn total_loss(bce: f64, lb_per_block: &[f64], lambda: f64) -> f64 {
    bce + lambda * lb_per_block.iter().sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert {
    /// `[r×d]`
    pub a: Tensor,
    /// `[d×r]`
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraExpert {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (r, d) = a.dims2()?;
        if b.shape() != [d, r] {
            return Err(Error::shape("lora", a.shape(), b.shape()));
        }
        Ok(LoraExpert { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `[N×d]`
    pub weight: Tensor,
}

/// Frozen two-layer GELU MLP `proj(gelu(fc(x)))` with `x·Wᵀ + b` projections.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenMlp {
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoleLayer {
    pub shared: Option<LoraExpert>,
    pub experts: Vec<LoraExpert>,
    pub router: Router,
    pub gate: GateMode,
}

impl MoleLayer {
    fn config(&self) -> MoleConfig {
        MoleConfig {
            blocks: BlockSet::List(vec![0]),
            shared_rank: self.shared.as_ref().map_or(1, LoraExpert::rank),
            shared_alpha: self.shared.as_ref().map(|s| s.alpha),
            expert_ranks: self.experts.iter().map(LoraExpert::rank).collect(),
            expert_alphas: Some(self.experts.iter().map(|e| e.alpha).collect()),
            use_shared: self.shared.is_some(),
            use_separate: !self.experts.is_empty(),
            placement: Placement::Mlp,
            msa_rank: 1,
            lambda: 0.0,
            route_cls: true,
            gate: self.gate,
        }
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        if let Some(sh) = &self.shared {
            s.insert(param_name(0, "shared.A"), sh.a.clone());
            s.insert(param_name(0, "shared.B"), sh.b.clone());
        }
        for (j, e) in self.experts.iter().enumerate() {
            s.insert(param_name(0, &format!("expert{j}.A")), e.a.clone());
            s.insert(param_name(0, &format!("expert{j}.B")), e.b.clone());
        }
        s.insert(param_name(0, "router.W"), self.router.weight.clone());
        s
    }
}

fn check_width(x: &Tensor, d: usize, op: &'static str) -> Result<()> {
    match x.dims2()? {
        (_, w) if w == d => Ok(()),
        _ => Err(Error::shape(op, x.shape(), &[0, d])),
    }
}

/// `(α/r)·x·Aᵀ·Bᵀ` for token rows `x` `[T×d]`.
pub fn lora_forward(x: &Tensor, expert: &LoraExpert) -> Result<Tensor> {
    check_width(x, expert.dim(), "lora_forward")?;
    let mut s = ParamStore::new();
    s.insert("A", expert.a.clone());
    s.insert("B", expert.b.clone());
    let mut g = Graph::new(&s);
    let xv = g.tape.leaf(x);
    let y = lora(&mut g, xv, "A", "B", expert.scale())?;
    Ok(g.tape.to_tensor(y))
}

/// Top-1 routing decision for each token row.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub indices: Vec<usize>,
    pub gates: Vec<f64>,
    /// Full `[T×N]` gate matrix.
    pub probs: Tensor,
}

pub fn route(x: &Tensor, router: &Router) -> Result<Routing> {
    let (n, d) = router.weight.dims2()?;
    check_width(x, d, "route")?;
    let probs = x.matmul(&router.weight.transpose()?)?.softmax(1)?;
    let stats = RoutingStats::from_probs(probs.data(), n);
    Ok(Routing {
        indices: stats.assignments,
        gates: stats.gates,
        probs,
    })
}

/// Frozen MLP output plus the MoLE bypass, with routing statistics.
pub fn mole_mlp_forward(x: &Tensor, mlp: &FrozenMlp, layer: &MoleLayer) -> Result<(Tensor, RoutingStats)> {
    let (t, d) = x.dims2()?;
    check_width(x, layer.router.weight.shape()[1], "mole_mlp_forward")?;
    let store = layer.store();
    let mut g = Graph::new(&store);
    let xv = g.tape.leaf(x);
    let fw = g.tape.leaf(&mlp.fc_weight);
    let fb = g.tape.leaf(&mlp.fc_bias);
    let pw = g.tape.leaf(&mlp.proj_weight);
    let pb = g.tape.leaf(&mlp.proj_bias);
    let h = g.tape.matmul_nt(xv, fw)?;
    let h = g.tape.add_row(h, fb)?;
    let h = g.tape.gelu(h);
    let h = g.tape.matmul_nt(h, pw)?;
    let mut h = g.tape.add_row(h, pb)?;
    if g.tape.shape(h) != [t, d] {
        return Err(Error::shape("mole_mlp_forward", g.tape.shape(h), &[t, d]));
    }
    let out = bypass(&mut g, &layer.config(), 0, xv, t, None)?;
    if let Some(delta) = out.delta {
        h = g.tape.add(h, delta)?;
    }
    Ok((g.tape.to_tensor(h), out.stats))
}
