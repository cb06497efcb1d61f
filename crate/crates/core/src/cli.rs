//! Command-line front end.
//!
//! ```text
//! hfmca <command> [--config FILE] [--out PATH] [--KEY VALUE]...
//! ```
//!
//! Exit codes: 0 success, 2 configuration or usage, 3 I/O or data format,
//! 4 divergence, 5 checkpoint or shape mismatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::augment::{sample_views, Signal};
use crate::config::RunConfig;
use crate::data::{load_dataset, save_dataset, synth_dataset, write_file, Dataset, SegmentSource};
use crate::error::{Error, Result};
use crate::model::{forward_batch, init_params, ModelConfig, ModelParams};
use crate::objective::{diagnostics, FeatureBatch};
use crate::probe::{loso_evaluate, LosoReport};
use crate::training::{
    pretrain, pretrain_loso, read_checkpoint, sha256_hex, stream_rng, stream_seed, PretrainOptions,
    Stream, TrainConfig, TrainState,
};

pub const USAGE: &str = "\
usage: hfmca <command> [options] [--KEY VALUE]...

commands:
  synth            --out DIR                      write a synthetic dataset
  pretrain         --data DIR --out DIR [--loso] [--resume CKPT]
  probe            --data DIR --out DIR (--checkpoint PATH | --random-baseline)
  diagnose         --data DIR --checkpoint FILE [--out DIR]
  augment-preview  --data DIR --out FILE.csv [--segment INDEX]

common options:
  --config FILE    flat TOML configuration; later --KEY VALUE pairs override it
  --seed N         global seed
  --workers N      worker threads (default 1)
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Pretrain,
    Probe,
    Diagnose,
    AugmentPreview,
}

impl Command {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "synth" => Self::Synth,
            "pretrain" => Self::Pretrain,
            "probe" => Self::Probe,
            "diagnose" => Self::Diagnose,
            "augment-preview" => Self::AugmentPreview,
            _ => return None,
        })
    }
}

/// A parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub segment: usize,
    pub loso: bool,
    pub random_baseline: bool,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub fn parse_args(args: &[String]) -> Result<Invocation> {
    let (cmd, rest) = args.split_first().ok_or_else(|| usage("missing command"))?;
    let command = Command::parse(cmd).ok_or_else(|| usage(format!("unknown command `{cmd}`")))?;
    let mut inv = Invocation {
        command,
        config: RunConfig::default(),
        out: None,
        data: None,
        checkpoint: None,
        resume: None,
        segment: 0,
        loso: false,
        random_baseline: false,
    };
    let mut config_file = None;
    let mut overrides = Vec::new();
    let mut it = rest.iter();
    while let Some(arg) = it.next() {
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("unexpected argument `{arg}`")))?;
        match name {
            "loso" => inv.loso = true,
            "random-baseline" => inv.random_baseline = true,
            _ => {
                let value = it
                    .next()
                    .ok_or_else(|| usage(format!("--{name} needs a value")))?;
                let path = || Some(PathBuf::from(value));
                match name {
                    "config" => config_file = path(),
                    "out" => inv.out = path(),
                    "data" => inv.data = path(),
                    "checkpoint" => inv.checkpoint = path(),
                    "resume" => inv.resume = path(),
                    "segment" => {
                        inv.segment = value
                            .parse()
                            .map_err(|_| usage(format!("--segment expects an index, got `{value}`")))?
                    }
                    key => overrides.push((key.replace('-', "_"), value.clone())),
                }
            }
        }
    }
    if let Some(path) = config_file {
        inv.config = RunConfig::from_file(&path)?;
    }
    for (key, value) in overrides {
        inv.config.set_from_str(&key, &value)?;
    }
    inv.config.validate()?;
    Ok(inv)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::InvalidArgument(_)
        | Error::EmptyBatch
        | Error::ContrastiveBatch => 2,
        Error::Io { .. } | Error::MissingRecording(_) | Error::NonFiniteSample(_) | Error::Format(_) => 3,
        Error::Divergence { .. } | Error::NotPositiveDefinite => 4,
        Error::Checkpoint(_) | Error::Shape(_) | Error::StaleTrace => 5,
    }
}

/// Runs a command line, printing results to `out` and errors to `err`.
/// Returns the process exit code.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        let _ = write!(out, "{USAGE}");
        return if args.is_empty() { 2 } else { 0 };
    }
    let result = parse_args(args).and_then(|inv| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(inv.config.workers)
            .build()
            .map_err(|e| usage(format!("worker pool: {e}")))?;
        pool.install(|| execute(&inv))
    });
    match result {
        Ok(lines) => {
            for line in lines {
                let _ = writeln!(out, "{line}");
            }
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("missing --{flag}")))
}

fn execute(inv: &Invocation) -> Result<Vec<String>> {
    match inv.command {
        Command::Synth => cmd_synth(&inv.config, require(&inv.out, "out")?),
        Command::Pretrain => cmd_pretrain(
            &inv.config,
            require(&inv.data, "data")?,
            require(&inv.out, "out")?,
            inv.loso,
            inv.resume.as_deref(),
        ),
        Command::Probe => {
            let source = match (&inv.checkpoint, inv.random_baseline) {
                (Some(p), false) => ParamsSource::Checkpoint(p.clone()),
                (None, true) => ParamsSource::RandomInit,
                _ => return Err(usage("probe needs exactly one of --checkpoint or --random-baseline")),
            };
            cmd_probe(&inv.config, require(&inv.data, "data")?, &source, require(&inv.out, "out")?)
        }
        Command::Diagnose => cmd_diagnose(
            &inv.config,
            require(&inv.checkpoint, "checkpoint")?,
            require(&inv.data, "data")?,
            inv.out.as_deref(),
        ),
        Command::AugmentPreview => cmd_augment_preview(
            &inv.config,
            require(&inv.data, "data")?,
            inv.segment,
            require(&inv.out, "out")?,
        ),
    }
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.resolved"), cfg.resolved().as_bytes())
}

fn load(cfg: &RunConfig, data: &Path) -> Result<Dataset> {
    let ds = load_dataset(data, &cfg.load_options())?;
    if ds.is_empty() {
        return Err(Error::Format(format!("{} holds no segments", data.display())));
    }
    Ok(ds)
}

fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    let (channels, time) = SegmentSource::shape(ds);
    ModelConfig {
        channels,
        time,
        ..cfg.train.model.clone()
    }
}

fn train_config(cfg: &RunConfig, ds: &Dataset) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed,
        model: model_config(cfg, ds),
        ..cfg.train.clone()
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let ds = synth_dataset(&cfg.synth, stream_seed(cfg.seed, Stream::Synth, 0, 0))?;
    save_dataset(&ds, out)?;
    write_resolved(cfg, out)?;
    Ok(vec![format!(
        "wrote {} segments, {} subjects, {} classes to {}",
        ds.len(),
        ds.subject_ids().len(),
        ds.class_count(),
        out.display()
    )])
}

pub fn cmd_pretrain(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    loso: bool,
    resume: Option<&Path>,
) -> Result<Vec<String>> {
    let ds = load(cfg, data)?;
    let train = train_config(cfg, &ds);
    train.validate()?;
    write_resolved(cfg, out)?;
    let resume = match resume {
        None => None,
        Some(_) if loso => return Err(usage("--resume cannot be combined with --loso")),
        Some(path) => match read_checkpoint(path)? {
            (params, Some(optimizer)) => Some(TrainState { params, optimizer }),
            (_, None) => {
                return Err(Error::Checkpoint(format!(
                    "{} holds no optimizer state",
                    path.display()
                )))
            }
        },
    };
    let opts = PretrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
        workers: 0,
    };
    let final_loss = |o: &crate::training::PretrainOutput| o.metrics.last().map_or(f64::NAN, |m| m.loss_total);
    if loso {
        let runs = pretrain_loso(&ds, &train, &opts)?;
        Ok(runs
            .iter()
            .map(|(s, o)| format!("subject {s}: final loss {:.6}", final_loss(o)))
            .collect())
    } else {
        let indices: Vec<usize> = (0..ds.len()).collect();
        let o = pretrain(&ds, &indices, &train, &opts)?;
        Ok(vec![format!("final loss {:.6}", final_loss(&o))])
    }
}

/// Where `probe` takes encoder parameters from.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamsSource {
    /// A checkpoint file used for every split, or a LOSO output directory
    /// holding `subject_<id>/final.ckpt`.
    Checkpoint(PathBuf),
    RandomInit,
}

#[derive(Serialize)]
struct ProbeSummary<'a> {
    mean: f64,
    std: f64,
    config_hash: String,
    subjects: &'a [crate::probe::SubjectResult],
}

pub fn cmd_probe(cfg: &RunConfig, data: &Path, params: &ParamsSource, out: &Path) -> Result<Vec<String>> {
    let ds = load(cfg, data)?;
    let random = || -> Result<ModelParams> {
        let model = model_config(cfg, &ds);
        init_params(&model, stream_seed(cfg.seed, Stream::Init, 0, 0))
    };
    let report: LosoReport = match params {
        ParamsSource::RandomInit => {
            let p = random()?;
            loso_evaluate(&ds, |_| Ok(p.clone()), &cfg.probe)?
        }
        ParamsSource::Checkpoint(path) if path.is_dir() => loso_evaluate(
            &ds,
            |s| Ok(read_checkpoint(&path.join(format!("subject_{s}")).join("final.ckpt"))?.0),
            &cfg.probe,
        )?,
        ParamsSource::Checkpoint(path) => {
            let p = read_checkpoint(path)?.0;
            loso_evaluate(&ds, |_| Ok(p.clone()), &cfg.probe)?
        }
    };
    write_resolved(cfg, out)?;
    write_file(&out.join("results.csv"), report.to_csv().as_bytes())?;
    let summary = ProbeSummary {
        mean: report.mean,
        std: report.std,
        config_hash: sha256_hex(cfg.resolved().as_bytes()),
        subjects: &report.subjects,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("summary.json"), json.as_bytes())?;
    let mut lines: Vec<String> = report
        .subjects
        .iter()
        .map(|s| format!("subject {}: accuracy {:.6}", s.subject, s.accuracy))
        .collect();
    lines.push(format!("mean accuracy {:.6} (std {:.6})", report.mean, report.std));
    Ok(lines)
}

pub fn cmd_diagnose(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<Vec<String>> {
    let (params, _) = read_checkpoint(checkpoint)?;
    let ds = load(cfg, data)?;
    let (c, t) = SegmentSource::shape(&ds);
    if (c, t) != (params.config.channels, params.config.time) {
        return Err(Error::Shape(format!(
            "data is {c}x{t}, checkpoint expects {}x{}",
            params.config.channels, params.config.time
        )));
    }
    let policy = crate::augment::AugPolicy {
        views: params.config.views,
        ..cfg.train.aug.clone()
    };
    let n = cfg.train.batch_size.min(ds.len());
    let views = (0..n)
        .map(|i| {
            let signal = Signal::from_f32(c, t, ds.samples(i))?;
            sample_views(&signal, i, &policy, &mut stream_rng(cfg.seed, Stream::Preview, i as u64, 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let (fwd, _) = forward_batch(&params, &views)?;
    let batch = FeatureBatch::new(
        fwd.n,
        fwd.views,
        params.config.d_low,
        params.config.d_high,
        fwd.s,
        fwd.z,
    )?;
    let report = diagnostics(&batch, &cfg.train.loss)?;
    if let Some(dir) = out {
        write_resolved(cfg, dir)?;
        let json = serde_json::to_string_pretty(&report).expect("diagnostics serialize");
        write_file(&dir.join("diagnostics.json"), json.as_bytes())?;
    }
    let rhos: Vec<String> = report.rhos.iter().map(|r| format!("{r:.4}")).collect();
    Ok(vec![
        format!("rho spectrum: [{}]", rhos.join(", ")),
        format!("rho_max {:.6}", report.rho_max),
        format!("offdiag_rms_r1 {:.6}", report.offdiag_rms_r1),
        format!("offdiag_rms_r2 {:.6}", report.offdiag_rms_r2),
        format!("z_var_min {:.6e}", report.z_var_min),
        format!("cca_residual {:.3e}", report.cca_residual),
        format!("collapsed {}", report.collapsed()),
    ])
}

pub fn cmd_augment_preview(cfg: &RunConfig, data: &Path, segment: usize, out: &Path) -> Result<Vec<String>> {
    let ds = load(cfg, data)?;
    if segment >= ds.len() {
        return Err(usage(format!("--segment {segment} outside {} segments", ds.len())));
    }
    let (c, t) = SegmentSource::shape(&ds);
    let signal = Signal::from_f32(c, t, ds.samples(segment))?;
    let mut rng = stream_rng(cfg.seed, Stream::Preview, segment as u64, 0);
    let set = sample_views(&signal, segment, &cfg.train.aug, &mut rng)?;
    let mut csv = String::from("channel,time,value,view\n");
    for (v, view) in std::iter::once(&signal).chain(&set.views).enumerate() {
        for ch in 0..c {
            for (i, x) in view.channel(ch).iter().enumerate() {
                csv.push_str(&format!("{ch},{i},{x},{v}\n"));
            }
        }
    }
    write_file(out, csv.as_bytes())?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_resolved(cfg, dir)?;
    Ok(vec![format!(
        "wrote segment {segment} and {} views to {}",
        set.views.len(),
        out.display()
    )])
}
