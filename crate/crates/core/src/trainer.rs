//! Training loop over adapter and head parameters, checkpoints, evaluation,
//! robustness sweeps, ablation grids and per-expert feature export.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::archive::{DType, TensorArchive};
use crate::config::{RouterInit, RunConfig};
use crate::error::{Error, Result};
use crate::forge::{augment, Applied, Corpus, Generator, Perturbation, Splits};
use crate::metrics::{accuracy, average_precision, tune_threshold, MetricsReport, ReportRow, ScoredSet};
use crate::mole::{self, BlockSet, LoraExpert, Placement, RoutingStats};
use crate::params::{Graph, ParamStore};
use crate::tensor::{derived_rng, AdamW, Tensor, Var};
use crate::vit::{self, count_trainable, ForwardVars};

/// Prefixes of the parameters the optimiser may touch.
pub const TRAINABLE_PREFIXES: [&str; 2] = ["mole.", "head."];

/// Backbone, adapters and head for one run configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
}

impl Model {
    /// Deterministic initialisation from the configuration.
    pub fn new(config: &RunConfig) -> Result<Model> {
        config.validate()?;
        let vit_cfg = &config.vit;
        let mut store = vit::init_backbone(vit_cfg, config.backbone_seed)?;
        vit::apply_stem(vit_cfg, &mut store, config.stem)?;
        if let Some(path) = &config.backbone {
            let archive = TensorArchive::load(path)?;
            let wanted = vit::backbone_shapes(vit_cfg);
            let missing: Vec<&str> = wanted
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| archive.get(n).is_none())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Archive(format!(
                    "{}: missing {} backbone tensors, first `{}`",
                    path.display(),
                    missing.len(),
                    missing[0]
                )));
            }
            let backbone = TensorArchive {
                entries: archive
                    .entries
                    .into_iter()
                    .filter(|e| e.name.starts_with("backbone."))
                    .collect(),
            };
            backbone.load_into(&mut store)?;
        }
        store.set_trainable("backbone.", false);
        mole::init_adapters(&mut store, vit_cfg, &config.mole, config.seed)?;
        let mut model = Model {
            config: config.clone(),
            store,
        };
        if config.router_init == RouterInit::Collapsed {
            model.collapse_routers()?;
        }
        Ok(model)
    }

    pub fn adapted_blocks(&self) -> Result<Vec<usize>> {
        self.config.mole.blocks.resolve(self.config.vit.depth)
    }

    /// First block that must run on the recording tape.
    pub fn first_live_block(&self) -> Result<usize> {
        Ok(self
            .adapted_blocks()?
            .first()
            .copied()
            .unwrap_or(self.config.vit.depth))
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        self.store.fingerprint("backbone.")
    }

    /// Point every router's first row along the mean MLP input of a probe batch,
    /// scaled so the mean token's expert-0 logit is 10.
    fn collapse_routers(&mut self) -> Result<()> {
        if !self.config.mole.use_separate || !self.config.mole.placement.adapts_mlp() {
            return Ok(());
        }
        let spec = self.config.synthetic_spec();
        let items: Vec<crate::forge::Item> = (0..8)
            .map(|i| crate::forge::Item {
                generator: Generator::Real,
                seed: 0x5eed_0000 + i,
            })
            .collect();
        let probe = Corpus::from_items(spec, items)?;
        let batch = probe.batch(&(0..probe.len()).collect::<Vec<_>>())?;
        let mut g = Graph::new(&self.store);
        let fv = vit::forward_graph(&mut g, &self.config.vit, &batch.images, Some(&self.config.mole))?;
        let d = self.config.vit.embed_dim;
        let mut rows = Vec::new();
        for r in &fv.routing {
            let x = g.tape.value(r.mlp_input);
            let n = x.len() / d;
            let mut mean = vec![0.0; d];
            for row in x.chunks(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
            }
            let norm2: f64 = mean.iter().map(|v| v * v).sum();
            rows.push((r.block, mean.into_iter().map(|v| 10.0 * v / norm2).collect::<Vec<_>>()));
        }
        drop(g);
        for (block, row) in rows {
            let w = self.store.get_mut(&mole::param_name(block, "router.W"))?;
            w.data_mut()[..d].copy_from_slice(&row);
        }
        Ok(())
    }

    /// Sigmoid scores for every item of `corpus`.
    pub fn scores(&self, corpus: &Corpus, perturbation: Option<Perturbation>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(corpus.len());
        let idx: Vec<usize> = (0..corpus.len()).collect();
        for chunk in idx.chunks(64) {
            let mut images = corpus.batch(chunk)?.images;
            if let Some(p) = perturbation {
                images = p.apply(&images)?;
            }
            let mut g = Graph::new(&self.store);
            let fv = vit::forward_graph(&mut g, &self.config.vit, &images, Some(&self.config.mole))?;
            let p = head(&mut g, fv.features)?;
            out.extend_from_slice(g.tape.value(p));
        }
        Ok(out)
    }
}

/// `σ(features·wᵀ + b)` as a `[B×1]` node.
fn head(g: &mut Graph, features: Var) -> Result<Var> {
    let w = g.param("head.weight")?;
    let b = g.param("head.bias")?;
    let z = g.tape.matmul_nt(features, w)?;
    let z = g.tape.add_row(z, b)?;
    Ok(g.tape.sigmoid(z))
}

/// Input to one forward pass.
pub enum Input<'a> {
    Images(&'a Tensor),
    /// Token activations `[B·T × d]` entering block `start`.
    Tokens(&'a Tensor, usize),
}

/// Scalar parts of one evaluation of the training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub bce: f64,
    /// Load-balance loss per adapted block, in block order.
    pub lb: Vec<f64>,
    pub routing: Vec<(usize, RoutingStats)>,
}

struct Recorded {
    loss: Var,
    parts: LossParts,
}

fn record_loss(g: &mut Graph, cfg: &RunConfig, input: Input, labels: &[f64]) -> Result<Recorded> {
    let fv: ForwardVars = match input {
        Input::Images(images) => vit::forward_graph(g, &cfg.vit, images, Some(&cfg.mole))?,
        Input::Tokens(t, start) => vit::forward_from_tokens(g, &cfg.vit, t, start, Some(&cfg.mole))?,
    };
    let p = head(g, fv.features)?;
    let bce = g.tape.bce(p, labels, 1e-12)?;
    let mut loss = bce;
    let mut lb = Vec::new();
    for r in &fv.routing {
        if let Some(v) = r.lb_loss {
            lb.push(g.tape.scalar(v));
            if cfg.mole.lambda > 0.0 {
                let scaled = g.tape.scale(v, cfg.mole.lambda);
                loss = g.tape.add(loss, scaled)?;
            }
        }
    }
    Ok(Recorded {
        loss,
        parts: LossParts {
            loss: g.tape.scalar(loss),
            bce: g.tape.scalar(bce),
            lb,
            routing: fv.routing.into_iter().map(|r| (r.block, r.stats)).collect(),
        },
    })
}

/// Value of `L = L_bce + λ·Σ L_lb` without recording gradients.
pub fn loss_value(store: &ParamStore, cfg: &RunConfig, input: Input, labels: &[f64]) -> Result<LossParts> {
    let mut g = Graph::new(store);
    Ok(record_loss(&mut g, cfg, input, labels)?.parts)
}

/// Loss and gradients; gradients are written into the tracked tensors of `store`.
pub fn loss_and_grads(store: &mut ParamStore, cfg: &RunConfig, input: Input, labels: &[f64]) -> Result<LossParts> {
    let mut g = Graph::new(store);
    let rec = record_loss(&mut g, cfg, input, labels)?;
    let (tape, bindings) = g.into_parts();
    let grads = tape.backward(rec.loss)?;
    store.absorb_grads(&grads, &bindings);
    Ok(rec.parts)
}

/// One optimisation step as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub lb: Vec<f64>,
    /// Dispatch fractions per adapted block.
    pub f: Vec<Vec<f64>>,
    pub augmented: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub blocks: Vec<usize>,
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn header(&self, experts: usize) -> String {
        let mut h = String::from("step\tloss\tbce");
        for b in &self.blocks {
            let _ = write!(h, "\tlb_b{b}");
        }
        for b in &self.blocks {
            for j in 0..experts {
                let _ = write!(h, "\tf_b{b}_e{j}");
            }
        }
        h
    }

    pub fn format_record(r: &StepRecord) -> String {
        let mut s = format!("{}\t{:.6}\t{:.6}", r.step, r.loss, r.bce);
        for v in &r.lb {
            let _ = write!(s, "\t{v:.6}");
        }
        for f in &r.f {
            for v in f {
                let _ = write!(s, "\t{v:.4}");
            }
        }
        s
    }

    pub fn to_tsv(&self, experts: usize) -> String {
        let mut out = self.header(experts);
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::format_record(r));
            out.push('\n');
        }
        out
    }

    /// Mean loss over the first and last `window` records.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n < 2 * window || window == 0 {
            return None;
        }
        let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..window]), mean(&self.records[n - window..])))
    }
}

/// Balanced batches: half real, half fake, each class walked through its own
/// per-epoch permutation derived from `(seed, class, epoch)`.
struct Sampler {
    seed: u64,
    classes: [Vec<usize>; 2],
    perms: [Option<(usize, Vec<usize>)>; 2],
}

impl Sampler {
    fn new(corpus: &Corpus, seed: u64) -> Result<Self> {
        let mut classes = [Vec::new(), Vec::new()];
        for (i, it) in corpus.items.iter().enumerate() {
            classes[it.label() as usize].push(i);
        }
        if classes.iter().any(Vec::is_empty) {
            return Err(Error::Contract("training corpus needs both real and fake images".into()));
        }
        Ok(Sampler {
            seed,
            classes,
            perms: [None, None],
        })
    }

    fn perm(&mut self, class: usize, epoch: usize) -> &[usize] {
        let stale = !matches!(&self.perms[class], Some((e, _)) if *e == epoch);
        if stale {
            use rand::seq::SliceRandom;
            let mut p = self.classes[class].clone();
            p.shuffle(&mut derived_rng(self.seed, &format!("epoch:{class}:{epoch}")));
            self.perms[class] = Some((epoch, p));
        }
        &self.perms[class].as_ref().expect("filled above").1
    }

    fn indices(&mut self, step: usize, batch: usize) -> Vec<usize> {
        let fake = batch / 2;
        let real = batch - fake;
        let mut out = Vec::with_capacity(batch);
        for (class, count) in [(0, real), (1, fake)] {
            let n = self.classes[class].len();
            for i in 0..count {
                let pos = step * count + i;
                let p = self.perm(class, pos / n);
                out.push(p[pos % n]);
            }
        }
        out
    }
}

/// Optimiser state plus everything needed to continue a run.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: usize,
    cache: HashMap<usize, Vec<f64>>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Trainer {
            model: Model::new(config)?,
            optimizer: AdamW::new(config.optim),
            step: 0,
            cache: HashMap::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.config)?;
        ckpt.params.load_into(&mut t.model.store)?;
        let mut moments = BTreeMap::new();
        for (name, p) in t.model.store.iter() {
            if !p.requires_grad {
                continue;
            }
            if let (Some(m), Some(v)) = (
                ckpt.optimizer.get(&format!("m.{name}")),
                ckpt.optimizer.get(&format!("v.{name}")),
            ) {
                moments.insert(
                    name.to_string(),
                    crate::tensor::optim::Moments {
                        first: m.data().to_vec(),
                        second: v.data().to_vec(),
                    },
                );
            }
        }
        t.optimizer.restore(ckpt.step as u64, moments);
        t.step = ckpt.step;
        Ok(t)
    }

    /// Train until `self.step == until`, calling `on_step` after each update.
    pub fn run(&mut self, train: &Corpus, until: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainLog> {
        let cfg = self.model.config.clone();
        let mut sampler = Sampler::new(train, cfg.seed)?;
        if train.spec != cfg.synthetic_spec() {
            return Err(Error::Config(format!(
                "corpus images are {}x{}x{}, model expects {}x{}x{}",
                train.spec.channels, train.spec.size, train.spec.size, cfg.vit.channels, cfg.vit.image_size, cfg.vit.image_size
            )));
        }
        let mut log = TrainLog {
            blocks: self.model.adapted_blocks()?,
            records: Vec::new(),
        };
        let start = self.model.first_live_block()?;
        let use_cache = cfg.cache_prefix && start > 0;
        while self.step < until {
            let idx = sampler.indices(self.step, cfg.batch_size);
            let batch = train.batch(&idx)?;
            let mut rng = derived_rng(cfg.seed, &format!("augment:{}", self.step));
            let (images, applied) = augment(&batch.images, &cfg.augment, &mut rng)?;
            let parts = if use_cache {
                let tokens = self.tokens(&idx, &images, &applied, start)?;
                loss_and_grads(&mut self.model.store, &cfg, Input::Tokens(&tokens, start), &batch.labels)?
            } else {
                loss_and_grads(&mut self.model.store, &cfg, Input::Images(&images), &batch.labels)?
            };
            let trainable = self
                .model
                .store
                .iter_mut()
                .filter(|(k, _)| TRAINABLE_PREFIXES.iter().any(|p| k.starts_with(p)));
            self.optimizer.step(trainable)?;
            self.model.store.zero_grads();
            self.step += 1;
            let rec = StepRecord {
                step: self.step,
                loss: parts.loss,
                bce: parts.bce,
                lb: parts.lb,
                f: parts.routing.into_iter().map(|(_, s)| s.f).collect(),
                augmented: applied.iter().filter(|a| **a != Applied::default()).count(),
            };
            on_step(&rec);
            log.records.push(rec);
        }
        Ok(log)
    }

    /// Prefix activations for a batch: cached rows for untouched images, fresh rows otherwise.
    fn tokens(&mut self, idx: &[usize], images: &Tensor, applied: &[Applied], start: usize) -> Result<Tensor> {
        let cfg = &self.model.config.vit;
        let per_img = cfg.num_tokens() * cfg.embed_dim;
        let px = cfg.channels * cfg.image_size * cfg.image_size;
        let need: Vec<usize> = (0..idx.len())
            .filter(|&k| applied[k] != Applied::default() || !self.cache.contains_key(&idx[k]))
            .collect();
        let mut fresh: HashMap<usize, Vec<f64>> = HashMap::new();
        if !need.is_empty() {
            let mut data = Vec::with_capacity(need.len() * px);
            for &k in &need {
                data.extend_from_slice(&images.data()[k * px..(k + 1) * px]);
            }
            let sub = Tensor::new(
                vec![need.len(), cfg.channels, cfg.image_size, cfg.image_size],
                data,
            )?;
            let t = vit::frozen_prefix(cfg, &self.model.store, &sub, start)?;
            for (j, &k) in need.iter().enumerate() {
                let rows = t.data()[j * per_img..(j + 1) * per_img].to_vec();
                if applied[k] == Applied::default() {
                    self.cache.insert(idx[k], rows.clone());
                }
                fresh.insert(k, rows);
            }
        }
        let mut out = Vec::with_capacity(idx.len() * per_img);
        for (k, i) in idx.iter().enumerate() {
            match fresh.get(&k) {
                Some(rows) => out.extend_from_slice(rows),
                None => out.extend_from_slice(&self.cache[i]),
            }
        }
        Tensor::new(vec![idx.len() * cfg.num_tokens(), cfg.embed_dim], out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = TensorArchive::new();
        let mut optimizer = TensorArchive::new();
        for prefix in TRAINABLE_PREFIXES {
            for e in TensorArchive::from_store(&self.model.store, prefix, DType::F64).entries {
                params.entries.push(e);
            }
        }
        for (name, m) in self.optimizer.moments() {
            let n = m.first.len();
            let t = |v: &[f64]| Tensor::new(vec![n], v.to_vec()).expect("non-empty moments");
            optimizer.push(format!("m.{name}"), DType::F64, t(&m.first));
            optimizer.push(format!("v.{name}"), DType::F64, t(&m.second));
        }
        Checkpoint {
            config: self.model.config.clone(),
            step: self.step,
            params,
            optimizer,
        }
    }
}

/// Trainable tensors, optimiser moments, configuration snapshot and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: TensorArchive,
    pub optimizer: TensorArchive,
}

impl Checkpoint {
    /// Writes `params.molearc`, `optim.molearc` and `run.cfg` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("params.molearc"))?;
        let mut opt = self.optimizer.clone();
        opt.entries.insert(
            0,
            crate::archive::Entry {
                name: "step".into(),
                dtype: DType::F64,
                tensor: Tensor::scalar(self.step as f64),
            },
        );
        opt.save(&dir.join("optim.molearc"))?;
        let cfg = dir.join("run.cfg");
        fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join("run.cfg"))?;
        let params = TensorArchive::load(&dir.join("params.molearc"))?;
        let mut optimizer = TensorArchive::load(&dir.join("optim.molearc"))?;
        let step = optimizer.require("step")?.data()[0] as usize;
        optimizer.entries.retain(|e| e.name != "step");
        Ok(Checkpoint {
            config,
            step,
            params,
            optimizer,
        })
    }

    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(&self.config)?;
        self.params.load_into(&mut m.store)?;
        Ok(m)
    }
}

/// Run `config.steps` steps from initialisation.
pub fn train(config: &RunConfig, corpus: &Corpus, on_step: impl FnMut(&StepRecord)) -> Result<(Checkpoint, TrainLog)> {
    let mut t = Trainer::new(config)?;
    let log = t.run(corpus, config.steps, on_step)?;
    Ok((t.checkpoint(), log))
}

/// Per-generator AP and accuracy on `test`, threshold tuned on clean `val` scores.
pub fn evaluate(
    model: &Model,
    test: &Corpus,
    val: Option<&Corpus>,
    perturbation: Option<Perturbation>,
) -> Result<MetricsReport> {
    let val = val.ok_or_else(|| Error::Contract("threshold tuning needs a validation split".into()))?;
    let threshold = {
        let s = ScoredSet::new(model.scores(val, None)?, val.labels())?;
        tune_threshold(&s, model.config.objective)?.0
    };
    let scores = model.scores(test, perturbation)?;
    report_from_scores(test, &scores, threshold, perturbation)
}

/// Build the per-generator table for already-computed scores.
pub fn report_from_scores(
    test: &Corpus,
    scores: &[f64],
    threshold: f64,
    perturbation: Option<Perturbation>,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for g in test.generators() {
        if g == Generator::Real {
            continue;
        }
        let (s, l): (Vec<f64>, Vec<f64>) = test
            .items
            .iter()
            .zip(scores)
            .filter(|(it, _)| it.generator == Generator::Real || it.generator == g)
            .map(|(it, &s)| (s, it.label()))
            .unzip();
        let set = ScoredSet::new(s, l)?;
        let acc = accuracy(&set, threshold);
        rows.push(ReportRow {
            name: g.to_string(),
            ap: average_precision(&set)?,
            acc: acc.balanced,
            real_acc: acc.real,
            fake_acc: acc.fake,
        });
    }
    if rows.is_empty() {
        return Err(Error::Contract("test split has no fake images".into()));
    }
    Ok(MetricsReport {
        label: perturbation.map_or("clean".to_string(), |p| p.to_string()),
        threshold,
        rows,
    })
}

/// One report per perturbation level: blur σ = 1..4, then quality 90..30.
pub fn robustness_sweep(model: &Model, test: &Corpus, val: &Corpus) -> Result<Vec<MetricsReport>> {
    let threshold = {
        let s = ScoredSet::new(model.scores(val, None)?, val.labels())?;
        tune_threshold(&s, model.config.objective)?.0
    };
    Perturbation::sweep()
        .into_iter()
        .map(|p| report_from_scores(test, &model.scores(test, Some(p))?, threshold, Some(p)))
        .collect()
}

/// `perturbation  mAP  mAcc` per report.
pub fn sweep_tsv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("perturbation\tmAP\tmAcc\n");
    for r in reports {
        let _ = writeln!(out, "{}\t{:.2}\t{:.2}", r.label, 100.0 * r.mean_ap(), 100.0 * r.mean_acc());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Blocks,
    Placement,
    Ranks,
    DataSize,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blocks" => Ok(Axis::Blocks),
            "placement" => Ok(Axis::Placement),
            "ranks" => Ok(Axis::Ranks),
            "data-size" | "data_size" => Ok(Axis::DataSize),
            other => Err(Error::Parse(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub label: String,
    pub config: RunConfig,
}

/// Run configurations for one axis, derived from `base`.
pub fn ablation_grid(base: &RunConfig, axis: Axis, data_sizes: &[usize]) -> Result<Vec<AblationRun>> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        AblationRun { label, config: c }
    };
    let runs = match axis {
        Axis::Blocks => {
            let depth = base.vit.depth;
            if depth < 6 {
                return Err(Error::Config(format!(
                    "blocks axis spans none, last1..last5 and all; depth {depth} cannot host it"
                )));
            }
            let mut v = vec![with("none".into(), &|c| c.mole.blocks = BlockSet::None)];
            for k in 1..=5 {
                v.push(with(format!("last{k}"), &|c| c.mole.blocks = BlockSet::Last(k)));
            }
            v.push(with("all".into(), &|c| c.mole.blocks = BlockSet::All));
            v
        }
        Axis::Placement => {
            let shared_only = |c: &mut RunConfig| {
                c.mole.use_shared = true;
                c.mole.use_separate = false;
            };
            vec![
                with("(a) MSA".into(), &|c| {
                    shared_only(c);
                    c.mole.placement = Placement::Msa;
                }),
                with("(b) MLP shared".into(), &|c| {
                    shared_only(c);
                    c.mole.placement = Placement::Mlp;
                }),
                with("(c) MSA+MLP".into(), &|c| {
                    shared_only(c);
                    c.mole.placement = Placement::Both;
                }),
                with("(d) MLP separate".into(), &|c| {
                    c.mole.use_shared = false;
                    c.mole.use_separate = true;
                    c.mole.placement = Placement::Mlp;
                }),
                with("(e) MLP shared+separate".into(), &|c| {
                    c.mole.use_shared = true;
                    c.mole.use_separate = true;
                    c.mole.placement = Placement::Mlp;
                }),
            ]
        }
        Axis::Ranks => {
            if !base.mole.use_separate || !base.mole.use_shared {
                return Err(Error::Config("ranks axis needs both shared and separate experts".into()));
            }
            let grid: [(usize, &[usize]); 8] = [
                (4, &[4, 8, 16]),
                (8, &[4, 8, 16]),
                (16, &[4, 8, 16]),
                (8, &[8, 16, 32]),
                (8, &[4, 4, 4]),
                (8, &[8, 8, 8]),
                (8, &[8, 8, 8, 8]),
                (8, &[4, 8, 16, 32]),
            ];
            grid.iter()
                .map(|(s, e)| {
                    let label = format!("{s}|{}", e.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","));
                    with(label, &|c| {
                        c.mole.shared_rank = *s;
                        c.mole.shared_alpha = None;
                        c.mole.expert_ranks = e.to_vec();
                        c.mole.expert_alphas = None;
                    })
                })
                .collect()
        }
        Axis::DataSize => {
            if data_sizes.is_empty() || data_sizes.windows(2).any(|w| w[0] >= w[1]) || data_sizes[0] < 2 {
                return Err(Error::Config("data sizes must be increasing and at least 2".into()));
            }
            data_sizes
                .iter()
                .map(|&n| with(format!("{n}"), &|c| c.data.train_count = n))
                .collect()
        }
    };
    for r in &runs {
        r.config.validate()?;
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub trainable: usize,
    pub percentage: f64,
    pub metrics: Option<(f64, f64)>,
}

/// Count every run; when `execute`, also train it and evaluate on the test split.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    data_sizes: &[usize],
    execute: bool,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let runs = ablation_grid(base, axis, data_sizes)?;
    let splits: Option<Splits> = if execute {
        let mut plan_cfg = base.clone();
        if axis == Axis::DataSize {
            plan_cfg.data.train_count = *data_sizes.last().expect("validated non-empty");
        }
        Some(plan_cfg.splits()?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for run in runs {
        progress(&run.label);
        let report = count_trainable(&run.config.vit, Some(&run.config.mole))?;
        let metrics = match &splits {
            Some(s) => {
                let train_split = s.train.truncated(run.config.data.train_count);
                let (ckpt, _) = train(&run.config, &train_split, |_| {})?;
                let r = evaluate(&ckpt.model()?, &s.test, Some(&s.val), None)?;
                Some((r.mean_ap(), r.mean_acc()))
            }
            None => None,
        };
        rows.push(AblationRow {
            label: run.label,
            trainable: report.trainable,
            percentage: report.percentage,
            metrics,
        });
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\ttrainable\ttrainable_pct\tmAP\tmAcc\n");
    for r in rows {
        let (ap, acc) = match r.metrics {
            Some((a, b)) => (format!("{:.2}", 100.0 * a), format!("{:.2}", 100.0 * b)),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(out, "{}\t{}\t{:.3}%\t{ap}\t{acc}", r.label, r.trainable, r.percentage);
    }
    out
}

/// Mean post-MLP feature of one image under one separate expert.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub image: usize,
    pub generator: Generator,
    pub label: f64,
    pub block: usize,
    pub expert: usize,
    pub values: Vec<f64>,
}

/// For each image and requested block, the token mean of
/// `mlp(x) + (α_j/r_j)·B_j·A_j·x` for every separate expert `j`.
pub fn export_features(model: &Model, corpus: &Corpus, blocks: &BlockSet) -> Result<Vec<FeatureRow>> {
    let cfg = &model.config;
    let adapted = model.adapted_blocks()?;
    if !cfg.mole.placement.adapts_mlp() || !cfg.mole.use_separate {
        return Err(Error::Config("feature export needs separate MLP experts".into()));
    }
    let wanted = blocks.resolve(cfg.vit.depth)?;
    if let Some(b) = wanted.iter().find(|b| !adapted.contains(b)) {
        return Err(Error::Config(format!("block {b} is not adapted")));
    }
    let t = cfg.vit.num_tokens();
    let d = cfg.vit.embed_dim;
    let mut rows = Vec::new();
    let idx: Vec<usize> = (0..corpus.len()).collect();
    for chunk in idx.chunks(32) {
        let batch = corpus.batch(chunk)?;
        let mut g = Graph::new(&model.store);
        let fv = vit::forward_graph(&mut g, &cfg.vit, &batch.images, Some(&cfg.mole))?;
        for r in fv.routing.iter().filter(|r| wanted.contains(&r.block)) {
            let x = g.tape.to_tensor(r.mlp_input);
            let mut mg = Graph::new(&model.store);
            let xv = mg.tape.leaf(&x);
            let m = vit::frozen_mlp(&mut mg, &cfg.vit, r.block, xv)?;
            let base = mg.tape.to_tensor(m);
            for j in 0..cfg.mole.expert_ranks.len() {
                let e = LoraExpert::new(
                    model.store.get(&mole::param_name(r.block, &format!("expert{j}.A")))?.clone(),
                    model.store.get(&mole::param_name(r.block, &format!("expert{j}.B")))?.clone(),
                    cfg.mole.expert_scale(j) * cfg.mole.expert_ranks[j] as f64,
                )?;
                let delta = mole::lora_forward(&x, &e)?;
                for (k, &item) in chunk.iter().enumerate() {
                    let mut mean = vec![0.0; d];
                    for tok in 0..t {
                        let row = (k * t + tok) * d;
                        for c in 0..d {
                            mean[c] += (base.data()[row + c] + delta.data()[row + c]) / t as f64;
                        }
                    }
                    let it = corpus.items[item];
                    rows.push(FeatureRow {
                        image: item,
                        generator: it.generator,
                        label: it.label(),
                        block: r.block,
                        expert: j,
                        values: mean,
                    });
                }
            }
        }
    }
    rows.sort_by_key(|r| (r.image, r.block, r.expert));
    Ok(rows)
}

pub fn features_csv(rows: &[FeatureRow]) -> String {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("image,generator,label,block,expert");
    for c in 0..d {
        let _ = write!(out, ",f{c}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},\"{}\",{},{},{}", r.image, r.generator, r.label, r.block, r.expert);
        for v in &r.values {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}
