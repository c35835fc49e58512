use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use molex::config::RunConfig;
use molex::forge::{Corpus, Generator};
use molex::mole::BlockSet;
use molex::spectra::{avg_fft_spectrum, export_spectrum};
use molex::trainer::{self, Axis, Checkpoint, TrainLog, Trainer};
use molex::vit::{self, Preset, ViTConfig};

#[derive(Parser)]
#[command(name = "molex", version, about = "Mixture of low-rank experts on frozen ViTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Line-oriented `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.overlay(cfg, false)
    }

    /// Apply the file (as overrides) and `--set` pairs on top of `cfg`.
    fn overlay(&self, mut cfg: RunConfig, with_file: bool) -> Result<RunConfig> {
        if with_file {
            if let Some(p) = &self.config {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                for line in text.lines() {
                    let line = line.split('#').next().unwrap_or("").trim();
                    if line.is_empty() {
                        continue;
                    }
                    let (k, v) = line
                        .split_once('=')
                        .with_context(|| format!("{}: `{line}` is not key = value", p.display()))?;
                    cfg.set(k.trim(), v.trim())?;
                }
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set `{kv}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and head; writes a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier checkpoint (keys from --config/--set override its run.cfg).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-generator AP/accuracy, optionally the blur/JPEG sweep.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score each variant along one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// blocks | placement | ranks | data-size
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', default_value = "2000,8000,20000")]
        data_sizes: Vec<usize>,
        /// Only report parameter counts.
        #[arg(long)]
        count_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average high-pass spectra per group of a manifest.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// generator_id | family | label
        #[arg(long, default_value = "generator_id")]
        group_by: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable-parameter report.
    Params {
        #[command(flatten)]
        common: Common,
        /// Presets to report (default b32,l14).
        #[arg(long, value_delimiter = ',')]
        preset: Vec<String>,
    },
    /// Write train/val/test splits as PPM images plus manifests.
    Forge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-expert mean post-MLP features as CSV.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Block set; defaults to every adapted block.
        #[arg(long)]
        blocks: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out, resume } => train(&common, &out, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            sweep,
            out,
        } => eval(&common, &checkpoint, sweep, out.as_deref()),
        Command::Ablate {
            common,
            axis,
            data_sizes,
            count_only,
            out,
        } => {
            let cfg = common.load()?;
            let axis: Axis = axis.parse()?;
            let rows = trainer::ablate(&cfg, axis, &data_sizes, !count_only, |label| {
                eprintln!("variant {label}");
            })?;
            emit(&trainer::ablation_tsv(&rows), out.as_deref())
        }
        Command::Spectra {
            common,
            manifest,
            group_by,
            out,
        } => spectra(&common, &manifest, &group_by, &out),
        Command::Params { common, preset } => params(&common, &preset),
        Command::Forge { common, out } => {
            let cfg = common.load()?;
            let splits = cfg.split_plan().build()?;
            for (name, c) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
                c.write_dir(&out.join(name))?;
                eprintln!("{name}: {} images", c.len());
            }
            Ok(())
        }
        Command::ExportFeatures {
            common,
            checkpoint,
            split,
            blocks,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = common.overlay(ckpt.config.clone(), true)?;
            let model = ckpt.model()?;
            let corpus = pick_split(&cfg, &split)?;
            let blocks: BlockSet = match blocks {
                Some(b) => b.parse()?,
                None => cfg.mole.blocks.clone(),
            };
            let rows = trainer::export_features(&model, &corpus, &blocks)?;
            fs::write(&out, trainer::features_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn pick_split(cfg: &RunConfig, name: &str) -> Result<Corpus> {
    let s = cfg.splits()?;
    Ok(match name {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        other => bail!("unknown split `{other}`"),
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(common: &Common, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut t = match resume {
        Some(dir) => {
            let mut ckpt = Checkpoint::load(dir)?;
            ckpt.config = common.overlay(ckpt.config, true)?;
            Trainer::from_checkpoint(&ckpt)?
        }
        None => Trainer::new(&common.load()?)?,
    };
    let cfg = t.model.config.clone();
    let splits = cfg.splits()?;
    let experts = cfg.mole.num_experts();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("train_log.tsv");
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let header = TrainLog {
        blocks: t.model.adapted_blocks()?,
        records: Vec::new(),
    }
    .header(experts);
    writeln!(log_file, "{header}")?;
    let start = Instant::now();
    let every = cfg.log_every.max(1);
    let log = t.run(&splits.train, cfg.steps, |r| {
        let _ = writeln!(log_file, "{}", TrainLog::format_record(r));
        if r.step % every == 0 || r.step == cfg.steps {
            eprintln!(
                "step {:>5}  loss {:.4}  bce {:.4}  {:.1}s",
                r.step,
                r.loss,
                r.bce,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    t.checkpoint().save(out)?;
    let model = &t.model;
    let report = trainer::evaluate(model, &splits.val, Some(&splits.val), None)?;
    eprintln!(
        "{} steps this run; val mAP {:.2}  mAcc {:.2}; checkpoint in {}",
        log.records.len(),
        100.0 * report.mean_ap(),
        100.0 * report.mean_acc(),
        out.display()
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, sweep: bool, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = common.overlay(ckpt.config.clone(), true)?;
    let mut model = ckpt.model()?;
    model.config = cfg.clone();
    let splits = cfg.splits()?;
    let text = if sweep {
        trainer::sweep_tsv(&trainer::robustness_sweep(&model, &splits.test, &splits.val)?)
    } else {
        trainer::evaluate(&model, &splits.test, Some(&splits.val), None)?.to_tsv()
    };
    emit(&text, out)
}

fn spectra(common: &Common, manifest: &Path, group_by: &str, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let corpus = Corpus::read_manifest(manifest)?;
    let key = |g: &Generator| -> Result<String> {
        Ok(match group_by {
            "generator_id" | "generator" => g.to_string(),
            "family" => g.family().to_string(),
            "label" => format!("{}", g.label()),
            other => bail!("cannot group by `{other}`"),
        })
    };
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, it) in corpus.items.iter().enumerate() {
        let k = key(&it.generator)?;
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(i),
            None => groups.push((k, vec![i])),
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, idx) in groups {
        let images = idx.iter().map(|&i| corpus.image(i)).collect::<molex::Result<Vec<_>>>()?;
        let map = avg_fft_spectrum(&images, cfg.highpass)?;
        let stem: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
            .collect();
        let (pgm, csv) = export_spectrum(&map, &out.join(stem.trim_matches('_')))?;
        eprintln!("{name}: {} images -> {}, {}", idx.len(), pgm.display(), csv.display());
    }
    Ok(())
}

fn params(common: &Common, presets: &[String]) -> Result<()> {
    let cfg = common.load()?;
    let presets: Vec<Preset> = if presets.is_empty() {
        vec![Preset::B32, Preset::L14]
    } else {
        presets.iter().map(|p| p.parse()).collect::<molex::Result<_>>()?
    };
    println!("preset\tblocks\ttrainable\tfrozen\ttrainable_pct");
    for p in presets {
        let vit = ViTConfig {
            head_input: cfg.vit.head_input,
            ..ViTConfig::preset(p)
        };
        for (label, r) in vit::param_table(&vit, &cfg.mole, &vit::reported_block_sets(p))? {
            println!("{}\t{label}\t{}\t{}\t{:.3}%", p.name(), r.trainable, r.frozen, r.percentage);
        }
    }
    Ok(())
}
