//! Run configuration read from `key = value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::forge::{AugmentConfig, Generator, SplitPlan, Splits, SyntheticSpec, Corpus};
use crate::metrics::Objective;
use crate::mole::{GateMode, MoleConfig, Placement};
use crate::spectra::HighPass;
use crate::tensor::AdamWConfig;
use crate::vit::{Activation, HeadInput, Preset, Stem, ViTConfig};

/// How the router weights start.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum RouterInit {
    #[default]
    Zero,
    /// Expert 0 wins every token by a wide logit margin.
    Collapsed,
}

/// Where the corpus comes from: three on-disk splits, or synthesised in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub train_fakes: Vec<Generator>,
    pub test_fakes: Vec<Generator>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            val_dir: None,
            test_dir: None,
            train_fakes: vec![
                Generator::Grid { period: 4.0, amp: 0.2 },
                Generator::LowFreq { sigma: 2.0, amp: 0.2 },
            ],
            test_fakes: vec![
                Generator::Checker { period: 2, amp: 0.2 },
                Generator::Ring { freq: 0.25, amp: 0.2 },
            ],
            train_count: 4000,
            val_count: 400,
            test_count: 800,
            data_seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub vit: ViTConfig,
    /// Archive with `backbone.*` weights; seeded init when absent.
    pub backbone: Option<PathBuf>,
    pub backbone_seed: u64,
    pub stem: Stem,
    pub mole: MoleConfig,
    pub optim: AdamWConfig,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub router_init: RouterInit,
    pub log_every: usize,
    /// Keep frozen-prefix activations of unperturbed training images in memory.
    pub cache_prefix: bool,
    pub objective: Objective,
    pub highpass: HighPass,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let preset = Preset::Toy64;
        RunConfig {
            preset,
            vit: ViTConfig::preset(preset),
            backbone: None,
            backbone_seed: 7,
            stem: Stem::Random,
            mole: MoleConfig::default(),
            optim: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            batch_size: 64,
            steps: 1500,
            seed: 0,
            router_init: RouterInit::Zero,
            log_every: 10,
            cache_prefix: true,
            objective: Objective::Balanced,
            highpass: HighPass::Median3,
            data: DataConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

/// Generator ids contain commas, so lists of them are `;`-separated.
fn parse_generators(v: &str) -> Result<Vec<Generator>> {
    v.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

impl RunConfig {
    /// Apply one `key = value` setting. `preset` resets every architecture field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.mole;
        let vit = &mut self.vit;
        match key.trim() {
            "preset" => {
                self.preset = parse(key, v)?;
                *vit = ViTConfig::preset(self.preset);
            }
            "image_size" => vit.image_size = parse(key, v)?,
            "patch_size" => vit.patch_size = parse(key, v)?,
            "channels" => vit.channels = parse(key, v)?,
            "embed_dim" => vit.embed_dim = parse(key, v)?,
            "depth" => vit.depth = parse(key, v)?,
            "num_heads" => vit.num_heads = parse(key, v)?,
            "mlp_hidden" => vit.mlp_hidden = parse(key, v)?,
            "proj_dim" => vit.proj_dim = parse(key, v)?,
            "activation" => {
                vit.activation = match v {
                    "gelu" => Activation::Gelu,
                    "quick_gelu" => Activation::QuickGelu,
                    _ => return Err(Error::Config(format!("unknown activation `{v}`"))),
                }
            }
            "head_input" => {
                vit.head_input = match v {
                    "cls" => HeadInput::Cls,
                    "projection" => HeadInput::Projection,
                    _ => return Err(Error::Config(format!("unknown head input `{v}`"))),
                }
            }
            "backbone" => self.backbone = opt_path(v),
            "backbone_seed" => self.backbone_seed = parse(key, v)?,
            "stem" => self.stem = parse(key, v)?,
            "blocks" => m.blocks = v.parse()?,
            "shared_rank" => m.shared_rank = parse(key, v)?,
            "shared_alpha" => m.shared_alpha = if v == "rank" { None } else { Some(parse(key, v)?) },
            "expert_ranks" => m.expert_ranks = parse_list(key, v)?,
            "expert_alphas" => {
                m.expert_alphas = if v == "rank" { None } else { Some(parse_list(key, v)?) }
            }
            "use_shared" => m.use_shared = parse_bool(key, v)?,
            "use_separate" => m.use_separate = parse_bool(key, v)?,
            "placement" => m.placement = v.parse()?,
            "msa_rank" => m.msa_rank = parse(key, v)?,
            "lambda" => m.lambda = parse(key, v)?,
            "route_cls" => m.route_cls = parse_bool(key, v)?,
            "gate" => m.gate = v.parse()?,
            "lr" => self.optim.lr = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "eps" => self.optim.eps = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "aug_prob" => self.augment.p = parse(key, v)?,
            "blur_sigma_max" => self.augment.blur_sigma_max = parse(key, v)?,
            "jpeg_quality_min" => self.augment.jpeg_quality_min = parse(key, v)?,
            "jpeg_quality_max" => self.augment.jpeg_quality_max = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "router_init" => {
                self.router_init = match v {
                    "zero" => RouterInit::Zero,
                    "collapsed" => RouterInit::Collapsed,
                    _ => return Err(Error::Config(format!("unknown router init `{v}`"))),
                }
            }
            "log_every" => self.log_every = parse(key, v)?,
            "cache_prefix" => self.cache_prefix = parse_bool(key, v)?,
            "threshold" => {
                self.objective = match v {
                    "balanced" => Objective::Balanced,
                    "overall" => Objective::Overall,
                    _ => return Err(Error::Config(format!("unknown threshold objective `{v}`"))),
                }
            }
            "highpass" => self.highpass = v.parse()?,
            "train_dir" => self.data.train_dir = opt_path(v),
            "val_dir" => self.data.val_dir = opt_path(v),
            "test_dir" => self.data.test_dir = opt_path(v),
            "train_fakes" => self.data.train_fakes = parse_generators(v)?,
            "test_fakes" => self.data.test_fakes = parse_generators(v)?,
            "train_count" => self.data.train_count = parse(key, v)?,
            "val_count" => self.data.val_count = parse(key, v)?,
            "test_count" => self.data.test_count = parse(key, v)?,
            "data_seed" => self.data.data_seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    /// A `preset` line is applied first so architecture overrides stick.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        pairs.sort_by_key(|(k, _)| k != "preset");
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.mole.validate()?;
        self.mole.blocks.resolve(self.vit.depth)?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.p) {
            return Err(Error::Config("aug_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Full snapshot; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let v = &self.vit;
        let m = &self.mole;
        let o = &self.optim;
        let a = &self.augment;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let lines: Vec<(&str, String)> = vec![
            ("preset", self.preset.to_string()),
            ("image_size", v.image_size.to_string()),
            ("patch_size", v.patch_size.to_string()),
            ("channels", v.channels.to_string()),
            ("embed_dim", v.embed_dim.to_string()),
            ("depth", v.depth.to_string()),
            ("num_heads", v.num_heads.to_string()),
            ("mlp_hidden", v.mlp_hidden.to_string()),
            ("proj_dim", v.proj_dim.to_string()),
            (
                "activation",
                match v.activation {
                    Activation::Gelu => "gelu",
                    Activation::QuickGelu => "quick_gelu",
                }
                .into(),
            ),
            (
                "head_input",
                match v.head_input {
                    HeadInput::Cls => "cls",
                    HeadInput::Projection => "projection",
                }
                .into(),
            ),
            ("backbone", path(&self.backbone)),
            ("backbone_seed", self.backbone_seed.to_string()),
            ("stem", self.stem.to_string()),
            ("blocks", m.blocks.label()),
            ("shared_rank", m.shared_rank.to_string()),
            ("shared_alpha", m.shared_alpha.map_or("rank".into(), |x| x.to_string())),
            ("expert_ranks", join(&m.expert_ranks, ",")),
            ("expert_alphas", m.expert_alphas.as_ref().map_or("rank".into(), |x| join(x, ","))),
            ("use_shared", m.use_shared.to_string()),
            ("use_separate", m.use_separate.to_string()),
            (
                "placement",
                match m.placement {
                    Placement::Mlp => "mlp",
                    Placement::Msa => "msa",
                    Placement::Both => "both",
                }
                .into(),
            ),
            ("msa_rank", m.msa_rank.to_string()),
            ("lambda", m.lambda.to_string()),
            ("route_cls", m.route_cls.to_string()),
            (
                "gate",
                match m.gate {
                    GateMode::Weighted => "weighted",
                    GateMode::Unweighted => "unweighted",
                }
                .into(),
            ),
            ("lr", o.lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("aug_prob", a.p.to_string()),
            ("blur_sigma_max", a.blur_sigma_max.to_string()),
            ("jpeg_quality_min", a.jpeg_quality_min.to_string()),
            ("jpeg_quality_max", a.jpeg_quality_max.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            (
                "router_init",
                match self.router_init {
                    RouterInit::Zero => "zero",
                    RouterInit::Collapsed => "collapsed",
                }
                .into(),
            ),
            ("log_every", self.log_every.to_string()),
            ("cache_prefix", self.cache_prefix.to_string()),
            (
                "threshold",
                match self.objective {
                    Objective::Balanced => "balanced",
                    Objective::Overall => "overall",
                }
                .into(),
            ),
            ("highpass", self.highpass.to_string()),
            ("train_dir", path(&d.train_dir)),
            ("val_dir", path(&d.val_dir)),
            ("test_dir", path(&d.test_dir)),
            ("train_fakes", join(&d.train_fakes, "; ")),
            ("test_fakes", join(&d.test_fakes, "; ")),
            ("train_count", d.train_count.to_string()),
            ("val_count", d.val_count.to_string()),
            ("test_count", d.test_count.to_string()),
            ("data_seed", d.data_seed.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            size: self.vit.image_size,
            channels: self.vit.channels,
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            spec: self.synthetic_spec(),
            train_fakes: self.data.train_fakes.clone(),
            test_fakes: self.data.test_fakes.clone(),
            train_count: self.data.train_count,
            val_count: self.data.val_count,
            test_count: self.data.test_count,
            seed: self.data.data_seed,
        }
    }

    /// Splits from disk when all three directories are set, otherwise synthesised.
    pub fn splits(&self) -> Result<Splits> {
        let d = &self.data;
        match (&d.train_dir, &d.val_dir, &d.test_dir) {
            (Some(tr), Some(va), Some(te)) => Ok(Splits {
                train: Corpus::read_dir(tr)?,
                val: Corpus::read_dir(va)?,
                test: Corpus::read_dir(te)?,
            }),
            (None, None, None) => self.split_plan().build(),
            _ => Err(Error::Config(
                "set all of train_dir, val_dir and test_dir, or none of them".into(),
            )),
        }
    }
}
