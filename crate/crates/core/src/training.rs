//! Pretraining: batching, augmentation, forward, loss, backward, optimizer
//! updates, metrics and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::augment::{sample_views, AugPolicy, Signal, ViewSet};
use crate::data::{loso_splits, write_file, SegmentSource};
use crate::error::{Error, Result};
use crate::model::{
    decode_params, encode_params, forward_batch, init_params, model_backward, ModelConfig,
    ModelGrads, ModelParams, Reader,
};
use crate::objective::{diagnostics, evaluate, FeatureBatch, LossConfig};

const OPTIMIZER_MAGIC: &[u8; 4] = b"ADAM";

/// Labels of the independent random streams derived from the global seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Preview = 4,
    Synth = 5,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the stream `(seed, label, a, b)`.
pub fn stream_seed(seed: u64, label: Stream, a: u64, b: u64) -> u64 {
    [label as u64, a, b]
        .iter()
        .fold(splitmix(seed), |acc, &v| splitmix(acc ^ splitmix(v)))
}

pub fn stream_rng(seed: u64, label: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label, a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub loss: LossConfig,
    pub aug: AugPolicy,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            grad_clip: 5.0,
            seed: 0,
            checkpoint_interval: 0,
            loss: LossConfig::default(),
            aug: AugPolicy::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be >= 2"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps_opt > 0.0) {
            return Err(Error::config("eps_opt", "must be > 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be > 0"));
        }
        if self.aug.views != self.model.views {
            return Err(Error::config("views", "augmentation and model view counts differ"));
        }
        self.loss.validate()?;
        self.aug.validate()?;
        self.model.validate()
    }
}

/// Adaptive-moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Hyperparameters of [`optimizer_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps_opt,
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut OptimizerState,
    cfg: AdamConfig,
) -> Result<()> {
    let gt = grads.tensors();
    if gt.len() != state.m.len() || gt.iter().zip(&state.m).any(|(g, m)| g.len() != m.len()) {
        return Err(Error::Shape("optimizer state does not match gradients".into()));
    }
    if gt.iter().flat_map(|t| t.iter()).any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.step,
            last_checkpoint: None,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(gt)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so its global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Parameters plus optimizer state, as stored in a training checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

pub fn encode_checkpoint(params: &ModelParams, opt: Option<&OptimizerState>) -> Vec<u8> {
    let mut out = encode_params(params);
    if let Some(opt) = opt {
        out.extend_from_slice(OPTIMIZER_MAGIC);
        out.extend_from_slice(&opt.step.to_le_bytes());
        for t in opt.m.iter().chain(&opt.v) {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

/// Reads a model or training checkpoint. The optimizer state is `None` for a
/// model-only file.
pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptimizerState>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader::new(&bytes);
    let params = decode_params(&mut r)?;
    if r.remaining().is_empty() {
        return Ok((params, None));
    }
    if r.take(4)? != OPTIMIZER_MAGIC {
        return Err(Error::Checkpoint("unexpected trailing bytes".into()));
    }
    let step = r.u64()?;
    let mut opt = OptimizerState::new(&params);
    opt.step = step;
    for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        r.f64s(t)?;
    }
    if !r.remaining().is_empty() {
        return Err(Error::Checkpoint("unexpected trailing bytes".into()));
    }
    Ok((params, Some(opt)))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, opt: Option<&OptimizerState>) -> Result<()> {
    write_file(path, &encode_checkpoint(params, opt))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_logdet: f64,
    pub loss_cont: f64,
    pub rho_max: f64,
    pub offdiag_rms_r1: f64,
    pub offdiag_rms_r2: f64,
    pub z_var_min: f64,
    pub cca_residual: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Where `metrics.jsonl` and checkpoints go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state; steps before `optimizer.step` are skipped.
    pub resume: Option<TrainState>,
    /// Worker threads for augmentation, forward and backward passes.
    /// 0 uses the ambient pool.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl PretrainOutput {
    pub fn final_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }
}

/// Steps per epoch for `instances` segments with drop-last batching.
pub fn steps_per_epoch(instances: usize, batch_size: usize) -> usize {
    instances / batch_size
}

fn view_set<S: SegmentSource + ?Sized>(
    source: &S,
    index: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ViewSet> {
    let (c, t) = source.shape();
    let signal = Signal::from_f32(c, t, source.samples(index))?;
    let mut rng = stream_rng(cfg.seed, Stream::Augment, epoch as u64, index as u64);
    sample_views(&signal, index, &cfg.aug, &mut rng)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Self-supervised pretraining over the segments at `indices`.
///
/// Labels are never read. Every batch is drawn from `indices` only.
pub fn pretrain<S: SegmentSource + ?Sized>(
    source: &S,
    indices: &[usize],
    cfg: &TrainConfig,
    opts: &PretrainOptions,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let (channels, time) = source.shape();
    if channels != cfg.model.channels || time != cfg.model.time {
        return Err(Error::Shape(format!(
            "data is {channels}x{time}, model expects {}x{}",
            cfg.model.channels, cfg.model.time
        )));
    }
    let per_epoch = steps_per_epoch(indices.len(), cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} segments cannot fill one batch of {}",
            indices.len(),
            cfg.batch_size
        )));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    with_pool(opts.workers, || run_pretrain(source, indices, cfg, opts, per_epoch))?
}

fn run_pretrain<S: SegmentSource + ?Sized>(
    source: &S,
    indices: &[usize],
    cfg: &TrainConfig,
    opts: &PretrainOptions,
    per_epoch: usize,
) -> Result<PretrainOutput> {
    let (mut params, mut opt) = match &opts.resume {
        Some(state) => {
            if state.params.config != cfg.model {
                return Err(Error::Shape("resume state has a different model config".into()));
            }
            (state.params.clone(), state.optimizer.clone())
        }
        None => {
            let p = init_params(&cfg.model, stream_seed(cfg.seed, Stream::Init, 0, 0))?;
            let o = OptimizerState::new(&p);
            (p, o)
        }
    };
    let adam = AdamConfig::from(cfg);
    let mut metrics_file = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join("metrics.jsonl");
            let file = if opts.resume.is_some() {
                fs::OpenOptions::new().create(true).append(true).open(&path)
            } else {
                fs::File::create(&path)
            };
            Some((file.map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let start_step = opt.step;

    for epoch in 0..cfg.epochs {
        let mut order = indices.to_vec();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        for b in 0..per_epoch {
            let step = (epoch * per_epoch + b) as u64;
            if step < start_step {
                continue;
            }
            let members = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let views = members
                .par_iter()
                .map(|&i| view_set(source, i, cfg, epoch))
                .collect::<Result<Vec<_>>>()?;
            let (out, trace) = forward_batch(&params, &views)?;
            let batch = FeatureBatch::new(
                out.n,
                out.views,
                cfg.model.d_low,
                cfg.model.d_high,
                out.s,
                out.z,
            )?;
            let diverged = || Error::Divergence {
                step,
                last_checkpoint: checkpoints.last().cloned(),
            };
            let eval = evaluate(&batch, &cfg.loss).map_err(|e| match e {
                Error::NotPositiveDefinite => diverged(),
                other => other,
            })?;
            if !eval.total.is_finite() {
                return Err(diverged());
            }
            let diag = diagnostics(&batch, &cfg.loss)?;
            let mut grads = model_backward(&params, &trace, &eval.grad_s, &eval.grad_z)?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            optimizer_step(&mut params, &grads, &mut opt, adam).map_err(|e| match e {
                Error::Divergence { .. } => diverged(),
                other => other,
            })?;

            let record = StepRecord {
                step,
                epoch,
                lr: cfg.lr,
                loss_total: eval.total,
                loss_logdet: eval.components.logdet,
                loss_cont: eval.components.cont,
                rho_max: diag.rho_max,
                offdiag_rms_r1: diag.offdiag_rms_r1,
                offdiag_rms_r2: diag.offdiag_rms_r2,
                z_var_min: diag.z_var_min,
                cca_residual: diag.cca_residual,
            };
            if let Some((file, path)) = metrics_file.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            metrics.push(record);

            if let Some(dir) = &opts.out_dir {
                if cfg.checkpoint_interval > 0 && opt.step % cfg.checkpoint_interval == 0 {
                    let path = dir.join(format!("step_{:06}.ckpt", opt.step));
                    write_checkpoint(&path, &params, Some(&opt))?;
                    checkpoints.push(path);
                }
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("final.ckpt");
        write_checkpoint(&path, &params, Some(&opt))?;
        checkpoints.push(path);
    }
    Ok(PretrainOutput {
        params,
        optimizer: opt,
        metrics,
        checkpoints,
    })
}

/// Pretrains one model per held-out subject on the remaining subjects.
/// Checkpoints of split `s` go to `out_dir/subject_<s>`.
pub fn pretrain_loso<S: SegmentSource + ?Sized>(
    source: &S,
    cfg: &TrainConfig,
    opts: &PretrainOptions,
) -> Result<Vec<(u32, PretrainOutput)>> {
    let splits = loso_splits(source)?;
    splits
        .iter()
        .map(|split| {
            source.begin_split(split.held_out_subject);
            let split_opts = PretrainOptions {
                out_dir: opts
                    .out_dir
                    .as_ref()
                    .map(|d| d.join(format!("subject_{}", split.held_out_subject))),
                resume: None,
                workers: opts.workers,
            };
            let out = pretrain(source, &split.train_indices, cfg, &split_opts)?;
            Ok((split.held_out_subject, out))
        })
        .collect()
}
