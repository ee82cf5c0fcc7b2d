//! Command-line front end: `segment`, `eval` and `verify-golden`.
//!
//! Exit codes: 0 success, 1 golden mismatch, 2 configuration or manifest
//! error, 3 missing or malformed file, 4 shape or numeric error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{Overrides, RunConfig};
use crate::error::{DoucError, Result, StageExt};
use crate::eval::{compare_report, ConfusionMatrix};
use crate::fade::MaskMode;
use crate::fusion::LabelMap;
use crate::io::{read_tensor_file, write_atomic, write_tensor, GoldenBundle};
use crate::pipeline::{verify_bundle, Engine, Tolerances};

pub const EXIT_VERIFY_FAILED: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "douc",
    version,
    about = "Training-free open-vocabulary segmentation inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment every image in the config and write `{out}/{id}.labels.bin`.
    Segment(RunArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Recompute every stage and compare with a golden bundle directory.
    VerifyGolden(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config JSON; relative paths inside resolve against its directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Export manifest (overrides the config's `manifest`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: config `out`, else ./douc-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weight of the gated branch [default: 0.5].
    #[arg(long, allow_negative_numbers = true)]
    pub alpha_og: Option<f32>,
    /// Weight of the affinity-proxy branch [default: 0.5].
    #[arg(long, allow_negative_numbers = true)]
    pub alpha_fade: Option<f32>,
    /// Weight of the class-token prior [default: 0].
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_cls: Option<f32>,
    /// Affinity temperature [default: 2.0].
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f32>,
    /// Gate strength in [0, 1] [default: 0.5].
    #[arg(long, allow_negative_numbers = true)]
    pub gate_alpha: Option<f32>,
    /// Gate sigmoid temperature [default: 0.25].
    #[arg(long, allow_negative_numbers = true)]
    pub gate_temp: Option<f32>,
    /// Comma-separated gated block indices [default: last quarter of the blocks].
    #[arg(long, value_delimiter = ',')]
    pub gate_layers: Option<Vec<usize>>,
    /// `instance` or `off` [default: instance].
    #[arg(long, value_parser = parse_mask_mode)]
    pub mask_mode: Option<MaskMode>,
    /// Average class logits inside pixel masks before the argmax [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub post_correct: Option<bool>,
    /// Also write every intermediate stage to `{out}/{id}/`.
    #[arg(long)]
    pub dump_intermediates: bool,
    /// Worker threads [default: available cores].
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `NAME=DIR` holding `{id}.labels.bin`; repeatable, the first is the
    /// baseline [default: the output directory].
    #[arg(long = "pred")]
    pub preds: Vec<String>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory with one golden bundle per image id.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Max-abs tolerance for every floating-point stage [default: 1e-3].
    #[arg(long, allow_negative_numbers = true)]
    pub tol: Option<f32>,
}

fn parse_mask_mode(s: &str) -> std::result::Result<MaskMode, String> {
    match s {
        "instance" => Ok(MaskMode::Instance),
        "off" => Ok(MaskMode::Off),
        other => Err(format!("unknown mask mode `{other}` (expected instance or off)")),
    }
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            manifest: self.manifest.clone(),
            out: self.out.clone(),
            alpha_og: self.alpha_og,
            alpha_fade: self.alpha_fade,
            lambda_cls: self.lambda_cls,
            tau: self.tau,
            gate_alpha: self.gate_alpha,
            gate_temp: self.gate_temp,
            gate_layers: self.gate_layers.clone(),
            mask_mode: self.mask_mode,
            post_correct: self.post_correct,
            dump_intermediates: self.dump_intermediates.then_some(true),
            jobs: self.jobs,
        }
    }

    fn load(&self) -> Result<(RunConfig, Engine)> {
        let (cfg, manifest) = RunConfig::load(self.config.as_deref(), &self.overrides())?;
        let engine = Engine::from_manifest(&manifest)?;
        Ok((cfg, engine))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DoucError::config("jobs", e.to_string()))
}

fn require_images(cfg: &RunConfig) -> Result<()> {
    if cfg.images.is_empty() {
        return Err(DoucError::config("images", "no images listed"));
    }
    Ok(())
}

pub fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.labels.bin"))
}

fn segment(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, engine) = args.load()?;
    require_images(&cfg)?;
    // Workers compute; this thread writes in config order.
    let results: Vec<_> = pool(cfg.jobs)?.install(|| {
        cfg.images
            .par_iter()
            .map(|entry| {
                let input = entry.load()?;
                engine.run(&input, &cfg.pipeline).stage(&format!("image {}", entry.id))
            })
            .collect()
    });
    for result in results {
        let r = result?;
        write_tensor(labels_path(&cfg.out, &r.id), &(&r.labels).into())?;
        if cfg.dump_intermediates {
            r.to_bundle().write(cfg.out.join(&r.id))?;
        }
        let _ = writeln!(out, "{} -> {}", r.id, labels_path(&cfg.out, &r.id).display());
    }
    Ok(0)
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    read_tensor_file(path)
        .and_then(|t| t.into_tensor2())
        .and_then(|t| LabelMap::from_tensor(&t))
        .stage(&path.display().to_string())
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, engine) = args.run.load()?;
    require_images(&cfg)?;
    let runs: Vec<(String, PathBuf)> = if args.preds.is_empty() {
        vec![("douc".into(), cfg.out.clone())]
    } else {
        args.preds
            .iter()
            .map(|p| match p.split_once('=') {
                Some((name, dir)) if !name.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
                _ => Err(DoucError::config("pred", format!("`{p}` is not NAME=DIR"))),
            })
            .collect::<Result<_>>()?
    };

    let mut missing = Vec::new();
    for entry in &cfg.images {
        match &entry.gt {
            None => missing.push(format!("{}: no gt listed", entry.id)),
            Some(p) if !p.is_file() => missing.push(format!("{}: gt {}", entry.id, p.display())),
            _ => {}
        }
        for (name, dir) in &runs {
            let p = labels_path(dir, &entry.id);
            if !p.is_file() {
                missing.push(format!("{}: prediction for run {name} at {}", entry.id, p.display()));
            }
        }
    }
    if !missing.is_empty() {
        for m in &missing {
            eprintln!("missing {m}");
        }
        return Err(DoucError::MissingFile(PathBuf::from(format!(
            "{} input(s)",
            missing.len()
        ))));
    }

    let classes = engine.text.classes();
    let mut metrics = Vec::with_capacity(runs.len());
    for (name, dir) in &runs {
        let mut cm = ConfusionMatrix::new(classes);
        for entry in &cfg.images {
            let gt = entry.load_gt()?.expect("checked above");
            let pred = read_labels(&labels_path(dir, &entry.id))?;
            cm.accumulate(&pred, &gt, cfg.ignore_label)
                .stage(&format!("eval {name}/{}", entry.id))?;
        }
        metrics.push((name.clone(), cm.metrics()));
    }
    let report = compare_report(&metrics, engine.text.class_names())?;
    if let Some(path) = &args.report {
        write_atomic(path, report.to_json().as_bytes())?;
    }
    let _ = write!(out, "{}", report.to_text());
    Ok(0)
}

fn verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, engine) = args.run.load()?;
    require_images(&cfg)?;
    let tol = match args.tol {
        Some(t) if t >= 0.0 => Tolerances {
            tokens: t,
            affinity: t,
            logits: t,
        },
        Some(t) => return Err(DoucError::config("tol", format!("{t} is negative"))),
        None => Tolerances::default(),
    };
    let mut failures = 0;
    for entry in &cfg.images {
        let golden = GoldenBundle::read(args.bundle.join(&entry.id))?;
        let result = engine
            .run(&entry.load()?, &cfg.pipeline)
            .stage(&format!("image {}", entry.id))?;
        for check in verify_bundle(&result.to_bundle(), &golden, &tol) {
            failures += usize::from(!check.passed());
            let _ = writeln!(out, "{}: {check}", entry.id);
        }
    }
    let _ = writeln!(out, "{} stage check(s) failed", failures);
    Ok(if failures == 0 { 0 } else { EXIT_VERIFY_FAILED })
}

/// Runs a parsed command, returning the process exit code.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Segment(a) => segment(a, out),
        Command::Eval(a) => eval(a, out),
        Command::VerifyGolden(a) => verify(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_kind() as i32
        }
    }
}

/// Parses `args` (including the program name) and runs.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli, &mut std::io::stdout().lock()),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                crate::error::ExitKind::Config as i32
            } else {
                0
            }
        }
    }
}
