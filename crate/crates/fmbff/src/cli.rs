//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fmbff_core::data::{self, Sample};
use fmbff_core::metrics::{self, MetricsReport};
use fmbff_core::model::Model;
use fmbff_core::tensor::{corrupt_backward, ops, OpKind};
use fmbff_core::train::{self as core_train, Trainer};
use fmbff_core::verify::{self, Block};
use fmbff_core::{Error as CoreError, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{AugmentMode, RunConfig};
use crate::dataset;
use crate::error::{Error, IoContext, Result};
use crate::manifest::{self, RunManifest};
use crate::pnm;
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "fmbff", version, about = "Segmentation with focal-modulation attention skips and bidirectional fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of textured images with elliptical masks.
    Synth(SynthArgs),
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predicted masks.
    Eval(EvalArgs),
    /// Segment a single PPM image.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    /// `S` or `HxW`.
    #[arg(long, default_value = "64")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the model, training and split seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
    pub ckpt: Option<PathBuf>,
    /// Dataset-shaped directory whose `masks/` hold predictions.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Also summarize each of K seeded folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or a comma list of fmcab, biffm, vitm, frm, model.
    #[arg(long, default_value = "all")]
    pub blocks: String,
    #[arg(long, hide = true, env = "FMBFF_CORRUPT_BACKWARD")]
    pub corrupt_backward: Option<String>,
}

/// Runs a parsed command line. `argv` is recorded in manifests.
pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a, argv),
        Command::Train(a) => train(&a, argv),
        Command::Eval(a) => eval(&a, argv),
        Command::Predict(a) => predict(&a, argv),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || CoreError::config("size", format!("`{}` is not S or HxW", s));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if h == 0 || w == 0 {
        return Err(bad().into());
    }
    Ok((h, w))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)
}

fn write_output(m: &mut RunManifest, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).at(&path)?;
    m.output(name, bytes);
    Ok(())
}

fn record_existing(m: &mut RunManifest, dir: &Path, name: &str) -> Result<()> {
    let path = dir.join(name);
    let bytes = fs::read(&path).at(&path)?;
    m.output(name, &bytes);
    Ok(())
}

fn synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let size = parse_size(&a.size)?;
    let mut m = RunManifest::new(argv.to_vec());
    m.seed = Some(a.seed);
    let samples = data::generate_synthetic(a.n, size, a.seed)?;
    dataset::write_dataset(&a.out, &samples)?;
    record_existing(&mut m, &a.out, dataset::MANIFEST)?;
    for s in &samples {
        record_existing(&mut m, &a.out, &format!("images/{}.ppm", s.id))?;
        record_existing(&mut m, &a.out, &format!("masks/{}_mask.pgm", s.id))?;
    }
    m.write(&a.out)?;
    println!("wrote {} samples of {}×{} to {}", a.n, size.0, size.1, a.out.display());
    Ok(())
}

fn check_extents(samples: &[Sample], size: (usize, usize)) -> Result<()> {
    for s in samples {
        if (s.height(), s.width()) != size {
            return Err(Error::Validation(format!(
                "`{}` is {}×{} but model.input_size is {}×{}",
                s.id,
                s.height(),
                s.width(),
                size.0,
                size.1
            )));
        }
    }
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path).at(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.train.augment = cfg.data.augment == AugmentMode::Random;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let cfg = load_config(a)?;
    let mut m = RunManifest::new(argv.to_vec());
    m.seed = Some(cfg.train.seed);
    m.config = Some(cfg.render());
    let samples = dataset::read_dataset(&a.data)?;
    check_extents(&samples, cfg.model.input_size)?;
    let plan = data::split(&data::ids(&samples), cfg.data.split_ratio, cfg.data.seed)?;
    let mut train_set = data::select(&samples, &plan.train_ids)?;
    let val_set = data::select(&samples, &plan.val_ids)?;
    if val_set.is_empty() {
        return Err(Error::Validation(format!(
            "data.split_ratio {} leaves no validation images out of {}",
            cfg.data.split_ratio,
            samples.len()
        )));
    }
    if cfg.data.augment == AugmentMode::Expand {
        train_set = data::expand(&train_set)?;
    }
    create_dir(&a.out)?;

    let (model, params, buffers) = Model::build::<f32>(&cfg.model)?;
    let quiet = a.quiet;
    let out = Trainer::new(&model, params, buffers, cfg.train.clone())?.run(&train_set, &val_set, |r| {
        if !quiet {
            eprintln!(
                "epoch {:3}  loss {:.4}  lr {:.6}  val dice {:.4}  val j {:.4}{}",
                r.epoch,
                r.loss,
                r.lr,
                r.val.d,
                r.val.j,
                if r.improved { "  *" } else { "" }
            );
        }
    })?;

    let best = checkpoint::encode(&checkpoint::to_entries(&Checkpoint {
        model: cfg.model.clone(),
        params: out.params,
        buffers: out.buffers,
        state: None,
    }));
    write_output(&mut m, &a.out, "best.ckpt", &best)?;
    m.checkpoint = Some(("best.ckpt".into(), manifest::git_blob_sha1(&best)));
    let last = checkpoint::encode(&checkpoint::to_entries(&Checkpoint {
        model: cfg.model.clone(),
        params: out.last_params,
        buffers: out.last_buffers,
        state: Some(out.state),
    }));
    write_output(&mut m, &a.out, "last.ckpt", &last)?;
    write_output(&mut m, &a.out, "history.csv", report::history_csv(&out.history).as_bytes())?;
    write_output(&mut m, &a.out, "config.txt", cfg.render().as_bytes())?;
    m.write(&a.out)?;
    println!(
        "best val dice {:.4} after {} epochs; checkpoint {}",
        out.best_val_dice,
        out.history.len(),
        a.out.join("best.ckpt").display()
    );
    Ok(())
}

fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let samples = dataset::read_dataset(&a.data)?;
    let mut m = RunManifest::new(argv.to_vec());
    let rows = match (&a.ckpt, &a.pred) {
        (Some(ckpt), _) => {
            let bytes = fs::read(ckpt).at(ckpt)?;
            let name = ckpt.display().to_string();
            let (model, ck) = checkpoint::from_entries::<f32>(&checkpoint::decode(&bytes, &name)?, &name)?;
            check_extents(&samples, ck.model.input_size)?;
            m.checkpoint = Some((name, manifest::git_blob_sha1(&bytes)));
            core_train::evaluate(&model, &ck.params, &ck.buffers, &samples, a.batch)?
        }
        (None, Some(pred)) => {
            let mut rows = Vec::with_capacity(samples.len());
            for s in &samples {
                let p = pnm::read_mask(&dataset::mask_path(pred, &s.id))?;
                if p.shape() != s.mask.shape() {
                    return Err(Error::Validation(format!(
                        "prediction for `{}` is {:?}, ground truth is {:?}",
                        s.id,
                        p.shape(),
                        s.mask.shape()
                    )));
                }
                let shape = [1, 1, s.height(), s.width()];
                let p = Tensor::new(&shape, p.to_vec())?;
                let gt = Tensor::new(&shape, s.mask.to_vec())?;
                rows.extend(metrics::evaluate(&p, &gt, std::slice::from_ref(&s.id))?);
            }
            rows
        }
        (None, None) => return Err(CoreError::Usage("one of --ckpt or --pred is required".into()).into()),
    };
    let folds = match a.folds {
        Some(k) => {
            m.seed = Some(a.seed);
            data::kfold(&data::ids(&samples), k, a.seed)?.folds
        }
        None => None,
    };
    let report: MetricsReport = metrics::aggregate(rows, folds.as_deref())?;
    create_dir(&a.out)?;
    let table = report::table(&report, true);
    write_output(&mut m, &a.out, "metrics.csv", report::csv(&report, true).as_bytes())?;
    write_output(&mut m, &a.out, "metrics.txt", table.as_bytes())?;
    m.write(&a.out)?;
    print!("{}", table);
    Ok(())
}

fn predict(a: &PredictArgs, argv: &[String]) -> Result<()> {
    let bytes = fs::read(&a.ckpt).at(&a.ckpt)?;
    let name = a.ckpt.display().to_string();
    let (model, ck) = checkpoint::from_entries::<f32>(&checkpoint::decode(&bytes, &name)?, &name)?;
    let image = pnm::read_image(&a.image)?;
    let (h, w) = (image.dim(1), image.dim(2));
    let (mh, mw) = ck.model.input_size;
    let x = Tensor::new(&[1, 3, h, w], image.to_vec())?;
    let x = if (h, w) == (mh, mw) { x } else { ops::bilinear_resize(&x, mh, mw)? };
    let blank = Tensor::zeros(&[1, mh, mw])?;
    let sample = Sample::new(Tensor::new(&[3, mh, mw], x.to_vec())?, blank, "input")?;
    let prob = core_train::predict(&model, &ck.params, &ck.buffers, std::slice::from_ref(&sample), 1)?.remove(0);
    let prob = if (h, w) == (mh, mw) { prob } else { ops::bilinear_resize(&prob, h, w)? };
    let prob = Tensor::new(&[1, h, w], prob.to_vec())?;

    create_dir(&a.out)?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut m = RunManifest::new(argv.to_vec());
    m.checkpoint = Some((name, manifest::git_blob_sha1(&bytes)));
    let mask_name = format!("{}_mask.pgm", stem);
    let prob_name = format!("{}_prob.pgm", stem);
    pnm::write_mask(&a.out.join(&mask_name), &prob)?;
    pnm::write_gray(&a.out.join(&prob_name), &prob)?;
    record_existing(&mut m, &a.out, &mask_name)?;
    record_existing(&mut m, &a.out, &prob_name)?;
    m.write(&a.out)?;
    println!("wrote {} and {}", a.out.join(&mask_name).display(), a.out.join(&prob_name).display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let blocks = Block::parse_list(&a.blocks)?;
    if let Some(op) = a.corrupt_backward.as_deref().filter(|s| !s.is_empty()) {
        let kind = OpKind::from_name(op)
            .ok_or_else(|| CoreError::config("corrupt_backward", format!("unknown op `{}`", op)))?;
        corrupt_backward(Some(kind));
    }
    let mut failures = Vec::new();
    for b in blocks {
        let r = verify::check_block(b)?;
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<6} max rel error {:.3e} (tolerance {:.0e}) {}",
            b.name(),
            r.report.max_rel_error(),
            b.tolerance(),
            status
        );
        if !r.passed() {
            for name in r.failing() {
                if let Some(i) = r.report.inputs.iter().find(|i| i.name == name) {
                    println!(
                        "  failing: {} [{}] analytic {:.6e} numeric {:.6e}",
                        name, i.worst_index, i.analytic, i.numeric
                    );
                }
                failures.push(format!("{}:{}", b.name(), name));
            }
        }
    }
    corrupt_backward(None);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!("gradients disagree for {}", failures.join(", "))))
    }
}
