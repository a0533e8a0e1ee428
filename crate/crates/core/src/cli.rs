//! Command-line surface. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablate::{ablate, datasets};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, VARIANTS};
use crate::error::{Error, Result};
use crate::eval::{decode, eps_sweep, evaluate, EvalOptions};
use crate::gradcheck::GradCheckOptions;
use crate::gradsuite::run_suite;
use crate::metrics::{band_width, binarize, boundary_iou, iou, to_bool};
use crate::model::Model;
use crate::refine::boundary_mask;
use crate::synth::{generate_set, read_dataset, write_dataset, SceneSample};
use crate::tape::sigmoid;
use crate::tensor::Tensor;
use crate::train::train;

#[derive(Parser, Debug)]
#[command(name = "semflow", version, about = "Referring segmentation with bidirectional semantic flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set optim.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::parse_with("", &self.overrides),
        }
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }
}

#[derive(Args, Debug, Clone)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `gen`; its `heldout` split is used.
    /// Without it the held-out split is regenerated from the checkpoint seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Expected structure; a mismatch with the checkpoint is an error.
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the training and held-out scenes.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `final.ckpt`, `best.ckpt` and `train_log.csv`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory written by `gen`; its `train` split is used.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split and print the JSON report.
    Eval {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Skip the boundary refiner.
        #[arg(long)]
        no_bar: bool,
        /// Override the boundary threshold.
        #[arg(long)]
        eps: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every variant over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = VARIANTS.map(String::from))]
        variants: Vec<String>,
        /// Write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Oracle upper bound and misalignment analysis.
    Oracle {
        #[command(flatten)]
        ck: CheckpointArgs,
    },
    /// Boundary metrics of the refined selection over several thresholds.
    EpsSweep {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.15, 0.2, 1.0])]
        eps: Vec<f64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Print every check, not only the failures.
        #[arg(long)]
        verbose: bool,
    },
    /// Refine one held-out selection and report what changed.
    Refine {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Held-out sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        eps: Option<f64>,
        /// Write raw and refined logits as a `[2×H×W]` FSTN file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn with_seed(cfg: &ConfigArgs, seed: u64) -> Result<RunConfig> {
    let mut c = cfg.load()?;
    c.seed = Some(seed);
    Ok(c)
}

fn split(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

struct Loaded {
    model: Model,
    config: RunConfig,
    heldout: Vec<SceneSample>,
}

fn load_checkpoint(ck: &CheckpointArgs) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(&ck.checkpoint)?;
    let expected = if ck.cfg.given() { Some(ck.cfg.load()?) } else { None };
    let model = checkpoint.model(expected.as_ref())?;
    let mut config = checkpoint.config.clone();
    if let Some(e) = &expected {
        config.bar.eps = e.bar.eps;
    }
    let heldout = match &ck.data {
        Some(dir) => read_dataset(&split(dir, "heldout"))?,
        None => {
            let seed = config.seed()?;
            generate_set(&config.data.spec(), seed, config.data.heldout_ids())?
        }
    };
    Ok(Loaded { model, config, heldout })
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Gen { cfg, seed, out: dir } => {
            let c = with_seed(&cfg, seed)?;
            let spec = c.data.spec();
            let (train_set, heldout) = datasets(&c, seed)?;
            write_dataset(&split(&dir, "train"), &spec, &train_set)?;
            write_dataset(&split(&dir, "heldout"), &spec, &heldout)?;
            std::fs::write(dir.join("config.toml"), c.to_toml())?;
            writeln!(out, "wrote {} train and {} held-out scenes to {}", train_set.len(), heldout.len(), dir.display())?;
        }
        Command::Train { cfg, seed, out: dir, data } => {
            let c = with_seed(&cfg, seed)?;
            let train_set = match &data {
                Some(d) => read_dataset(&split(d, "train"))?,
                None => generate_set(&c.data.spec(), seed, c.data.train_ids())?,
            };
            std::fs::create_dir_all(&dir)?;
            let mut model = Model::new(&c.model(), seed)?;
            let mut log = BufWriter::new(File::create(dir.join("train_log.csv"))?);
            let summary = train(&mut model, &train_set, &c.optim, &c.loss, seed, &mut log)?;
            log.flush()?;
            let last = Checkpoint::from_model(&c, summary.steps, &model);
            last.save(&dir.join("final.ckpt"))?;
            let best = match summary.best {
                Some((step, params)) => Checkpoint {
                    config: c.clone(),
                    step,
                    params,
                },
                None => last.clone(),
            };
            best.save(&dir.join("best.ckpt"))?;
            std::fs::write(dir.join("config.toml"), c.to_toml())?;
            let first = summary.losses.first().copied().unwrap_or(f64::NAN);
            let tail = &summary.losses[summary.losses.len().saturating_sub(100)..];
            let end = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            writeln!(out, "trained {} steps: loss {first:.4} -> {end:.4} (last-100 mean)", summary.steps)?;
            writeln!(out, "final {} sha256 {}", dir.join("final.ckpt").display(), last.digest_hex())?;
            writeln!(out, "best  {} (step {})", dir.join("best.ckpt").display(), best.step)?;
        }
        Command::Eval { ck, no_bar, eps, out: path } => {
            let l = load_checkpoint(&ck)?;
            let mut opts = EvalOptions::for_model(&l.model);
            opts.eps = eps.unwrap_or(l.config.bar.eps);
            if no_bar {
                opts.refine = false;
            }
            let e = evaluate(&l.model, &l.heldout, &opts)?;
            let json = e.to_json();
            if let Some(p) = path {
                std::fs::write(p, &json)?;
            }
            writeln!(out, "{json}")?;
        }
        Command::Ablate { cfg, seeds, variants, out: path } => {
            let c = cfg.load()?;
            let names: Vec<&str> = variants.iter().map(String::as_str).collect();
            for v in &names {
                c.variant(v)?;
            }
            let table = ablate(&c, &names, &seeds, &mut std::io::stderr())?;
            write!(out, "{}", table.render())?;
            for r in &table.recovery {
                writeln!(
                    out,
                    "recovery seed {}: {} baseline failures, IoU baseline {:.4} full {:.4} (margin {:+.4}), oracle baseline {:.4} full {:.4}",
                    r.seed, r.failures, r.baseline_iou, r.full_iou, r.margin, r.baseline_oracle, r.full_oracle
                )?;
            }
            if let Some(p) = path {
                std::fs::write(p, serde_json::to_string_pretty(&table)?)?;
            }
        }
        Command::Oracle { ck } => {
            let l = load_checkpoint(&ck)?;
            let e = evaluate(&l.model, &l.heldout, &EvalOptions::for_model(&l.model))?;
            let v = serde_json::json!({
                "oracle": e.report.oracle,
                "misalignment": e.report.misalignment,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
        }
        Command::EpsSweep { ck, eps } => {
            let l = load_checkpoint(&ck)?;
            let rows = eps_sweep(&l.model, &l.heldout, &eps)?;
            writeln!(out, "{:>6} {:>8} {:>8} {:>8} {:>8}", "eps", "gBIoU", "cBIoU", "gIoU", "cIoU")?;
            for r in &rows {
                writeln!(out, "{:>6.3} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", r.eps, r.gbiou, r.cbiou, r.giou, r.ciou)?;
            }
            writeln!(out, "{}", serde_json::to_string(&rows)?)?;
        }
        Command::Gradcheck { verbose } => {
            let report = run_suite(&GradCheckOptions::default())?;
            for e in &report.entries {
                let ok = e.report.passed();
                if verbose || !ok {
                    writeln!(out, "{} {:<44} {:.3e}", if ok { "ok  " } else { "FAIL" }, e.name, e.report.max_rel_err())?;
                }
            }
            writeln!(
                out,
                "{} checks, max rel err {:.3e} (tolerance {:.0e})",
                report.entries.len(),
                report.max_rel_err(),
                report.tolerance
            )?;
            return Ok(if report.passed() { 0 } else { 2 });
        }
        Command::Refine { ck, index, eps, out: path } => {
            let l = load_checkpoint(&ck)?;
            let sample = l
                .heldout
                .get(index)
                .ok_or_else(|| Error::Invalid(format!("held-out index {index} out of range ({})", l.heldout.len())))?;
            let eps = eps.unwrap_or(l.config.bar.eps);
            let d = decode(&l.model, sample, &EvalOptions::raw())?;
            let refined = l.model.refine_one(&d.mask, &d.pixels, eps)?;
            let prob = d.mask.map(sigmoid);
            let band = boundary_mask(&prob, eps)?;
            let (h, w) = (d.mask.shape()[0], d.mask.shape()[1]);
            let gt_all = sample.target_masks(l.model.mask_stride())?;
            let gt = to_bool(gt_all.row(sample.referred));
            let (before, after) = (binarize(d.mask.data()), binarize(refined.data()));
            let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
            let bw = band_width(h, w);
            writeln!(out, "sample {} selected query {} eps {eps}", sample.id, d.selected)?;
            writeln!(out, "band pixels {} flipped pixels {changed}", band.data().iter().filter(|&&v| v > 0.0).count())?;
            writeln!(out, "IoU {:.4} -> {:.4}", iou(&before, &gt)?, iou(&after, &gt)?)?;
            writeln!(out, "boundary IoU {:.4} -> {:.4}", boundary_iou(&before, &gt, h, w, bw)?, boundary_iou(&after, &gt, h, w, bw)?)?;
            if let Some(p) = path {
                let mut data = d.mask.data().to_vec();
                data.extend_from_slice(refined.data());
                crate::fstn::write_file(&p, &Tensor::new(&[2, h, w], data)?, crate::fstn::Dtype::F64)?;
            }
        }
    }
    Ok(0)
}
