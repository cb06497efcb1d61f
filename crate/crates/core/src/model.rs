//! Weight-sharing view encoder and fusion projector with hand-written
//! reverse-mode gradients.
//!
//! The encoder is a temporal convolution across all channels, a rectifier,
//! non-overlapping average pooling and an MLP. The projector is a 3-layer MLP
//! over the concatenation of the `T` view features. Every view of every
//! instance goes through the same [`EncoderParams`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{Signal, ViewSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HFMP";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Instances per gradient partial sum. Fixed so the reduction order does not
/// depend on the number of worker threads.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub channels: usize,
    pub time: usize,
    pub views: usize,
    pub d_low: usize,
    pub d_high: usize,
    pub conv_width: usize,
    pub conv_maps: usize,
    pub pool: usize,
    pub encoder_hidden: Vec<usize>,
    pub projector_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            time: 400,
            views: 4,
            d_low: 32,
            d_high: 32,
            conv_width: 25,
            conv_maps: 16,
            pool: 4,
            encoder_hidden: vec![128],
            projector_hidden: 512,
        }
    }
}

impl ModelConfig {
    pub fn conv_len(&self) -> usize {
        self.time + 1 - self.conv_width
    }

    pub fn pooled_len(&self) -> usize {
        self.conv_len() / self.pool
    }

    pub fn flat_len(&self) -> usize {
        self.conv_maps * self.pooled_len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("time", self.time),
            ("views", self.views),
            ("d_low", self.d_low),
            ("d_high", self.d_high),
            ("conv_width", self.conv_width),
            ("conv_maps", self.conv_maps),
            ("pool", self.pool),
            ("projector_hidden", self.projector_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.d_low != self.d_high {
            return Err(Error::config(
                "d_high",
                format!("must equal d_low ({}), got {}", self.d_low, self.d_high),
            ));
        }
        if self.conv_width > self.time || self.conv_len() < self.pool {
            return Err(Error::config(
                "conv_width",
                format!(
                    "width {} and pool {} leave no output for {} samples",
                    self.conv_width, self.pool, self.time
                ),
            ));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::config("encoder_hidden", "sizes must be positive"));
        }
        Ok(())
    }
}

/// Fully connected layer, `weight` row-major `out × inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            weight: vec![0.0; out * inp],
            bias: vec![0.0; out],
        }
    }

    fn glorot(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = glorot_bound(inp, out);
        let mut layer = Self::zeros(out, inp);
        layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
        layer
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        self.weight
            .chunks_exact(self.inp)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂x`.
    fn backward(&self, x: &[f64], g: &[f64], grad: &mut Dense, need_input: bool) -> Vec<f64> {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad.bias[o] += go;
            let row = &mut grad.weight[o * self.inp..(o + 1) * self.inp];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += go * xi;
            }
        }
        if !need_input {
            return Vec::new();
        }
        let mut gx = vec![0.0; self.inp];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            for (gi, &w) in gx.iter_mut().zip(&self.weight[o * self.inp..(o + 1) * self.inp]) {
                *gi += go * w;
            }
        }
        gx
    }
}

/// Temporal convolution over all input channels, `weight` laid out
/// `maps × channels × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub maps: usize,
    pub channels: usize,
    pub width: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    fn zeros(maps: usize, channels: usize, width: usize) -> Self {
        Self {
            maps,
            channels,
            width,
            weight: vec![0.0; maps * channels * width],
            bias: vec![0.0; maps],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv: Conv1d,
    /// Rectifier after every layer except the last.
    pub mlp: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    /// Exactly three layers; rectifier after the first two.
    pub layers: Vec<Dense>,
}

/// Encoder and projector parameters. The same type carries gradients.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub projector: ProjectorParams,
    generation: u64,
}

pub type ModelGrads = ModelParams;

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.encoder == other.encoder
            && self.projector == other.projector
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[inline]
/// Eight fixed accumulation lanes, so the compiler can vectorize while the
/// summation order stays fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f64>() + tail
}

impl ModelParams {
    /// All-zero parameters of the configured shape.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut mlp = Vec::new();
        let mut inp = config.flat_len();
        for &h in config.encoder_hidden.iter().chain([&config.d_low]) {
            mlp.push(Dense::zeros(h, inp));
            inp = h;
        }
        let h = config.projector_hidden;
        let layers = vec![
            Dense::zeros(h, config.views * config.d_low),
            Dense::zeros(h, h),
            Dense::zeros(config.d_high, h),
        ];
        Self {
            config: config.clone(),
            encoder: EncoderParams {
                conv: Conv1d::zeros(config.conv_maps, config.channels, config.conv_width),
                mlp,
            },
            projector: ProjectorParams { layers },
            generation: 0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Bumped whenever parameters are mutated through [`Self::tensors_mut`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Parameter tensors in declaration order: conv weight, conv bias, each
    /// encoder layer's weight and bias, each projector layer's weight and bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.encoder.conv.weight, &self.encoder.conv.bias];
        for l in self.encoder.mlp.iter().chain(&self.projector.layers) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.encoder.conv.weight,
            &mut self.encoder.conv.bias,
        ];
        for l in self.encoder.mlp.iter_mut().chain(&mut self.projector.layers) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Encoder tensors only (the first `2 + 2·layers` of [`Self::tensors`]).
    pub fn encoder_tensors(&self) -> Vec<&[f64]> {
        let n = 2 + 2 * self.encoder.mlp.len();
        self.tensors().into_iter().take(n).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    let conv = &mut params.encoder.conv;
    let a = glorot_bound(conv.channels * conv.width, conv.maps * conv.width);
    conv.weight.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
    for l in params.encoder.mlp.iter_mut().chain(&mut params.projector.layers) {
        *l = Dense::glorot(l.out, l.inp, &mut rng);
    }
    Ok(params)
}

/// Cached activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Vec<f64>,
    conv_pre: Vec<f64>,
    /// Input of every MLP layer; the first is the flattened pooled map.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of every MLP layer but the last.
    layer_pre: Vec<Vec<f64>>,
}

/// Cached activations of one projector pass.
#[derive(Debug, Clone)]
pub struct ProjectorTrace {
    input: Vec<f64>,
    pre: [Vec<f64>; 2],
    hidden: Vec<Vec<f64>>,
}

impl ProjectorTrace {
    /// Rectified hidden activations after layers 1 and 2.
    pub fn hidden(&self) -> &[Vec<f64>] {
        &self.hidden
    }
}

pub fn encoder_forward(params: &ModelParams, view: &Signal) -> Result<(Vec<f64>, EncoderTrace)> {
    let cfg = &params.config;
    if view.channels() != cfg.channels || view.time() != cfg.time {
        return Err(Error::Shape(format!(
            "view is {}x{}, encoder expects {}x{}",
            view.channels(),
            view.time(),
            cfg.channels,
            cfg.time
        )));
    }
    let conv = &params.encoder.conv;
    let (len, width, time) = (cfg.conv_len(), conv.width, cfg.time);
    let x = view.as_slice();
    let mut conv_pre = Vec::with_capacity(conv.maps * len);
    for f in 0..conv.maps {
        let mut row = vec![conv.bias[f]; len];
        for c in 0..conv.channels {
            let xc = &x[c * time..(c + 1) * time];
            let wk = &conv.weight[(f * conv.channels + c) * width..(f * conv.channels + c + 1) * width];
            for (k, &w) in wk.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (r, &xv) in row.iter_mut().zip(&xc[k..k + len]) {
                    *r += w * xv;
                }
            }
        }
        conv_pre.extend(row);
    }
    let pooled_len = cfg.pooled_len();
    let inv_pool = 1.0 / cfg.pool as f64;
    let mut flat = Vec::with_capacity(cfg.flat_len());
    for f in 0..conv.maps {
        let row = &conv_pre[f * len..(f + 1) * len];
        for j in 0..pooled_len {
            let s: f64 = row[j * cfg.pool..(j + 1) * cfg.pool].iter().map(|&v| v.max(0.0)).sum();
            flat.push(s * inv_pool);
        }
    }
    let mut layer_inputs = vec![flat];
    let mut layer_pre = Vec::new();
    let last = params.encoder.mlp.len() - 1;
    for (l, layer) in params.encoder.mlp.iter().enumerate() {
        let pre = layer.forward(layer_inputs.last().expect("input"));
        if l == last {
            let trace = EncoderTrace {
                input: x.to_vec(),
                conv_pre,
                layer_inputs,
                layer_pre,
            };
            return Ok((pre, trace));
        }
        layer_inputs.push(pre.iter().map(|v| v.max(0.0)).collect());
        layer_pre.push(pre);
    }
    unreachable!("encoder has at least one layer")
}

/// Accumulates encoder gradients for upstream gradient `grad_s` into `grads`.
fn encoder_backward(params: &ModelParams, trace: &EncoderTrace, grad_s: &[f64], grads: &mut ModelGrads) {
    let cfg = &params.config;
    let mlp = &params.encoder.mlp;
    let mut g = grad_s.to_vec();
    for l in (0..mlp.len()).rev() {
        if l < mlp.len() - 1 {
            for (gi, &p) in g.iter_mut().zip(&trace.layer_pre[l]) {
                if p <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        g = mlp[l].backward(&trace.layer_inputs[l], &g, &mut grads.encoder.mlp[l], true);
    }
    // g is now ∂/∂(flattened pooled map).
    let conv = &params.encoder.conv;
    let gconv = &mut grads.encoder.conv;
    let (len, width, time, pool) = (cfg.conv_len(), conv.width, cfg.time, cfg.pool);
    let pooled_len = cfg.pooled_len();
    let inv_pool = 1.0 / pool as f64;
    let mut ga = vec![0.0; len];
    for f in 0..conv.maps {
        ga.fill(0.0);
        let pre = &trace.conv_pre[f * len..(f + 1) * len];
        let mut any = false;
        for j in 0..pooled_len {
            let gp = g[f * pooled_len + j] * inv_pool;
            if gp == 0.0 {
                continue;
            }
            for tau in j * pool..(j + 1) * pool {
                if pre[tau] > 0.0 {
                    ga[tau] = gp;
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        gconv.bias[f] += ga.iter().sum::<f64>();
        for c in 0..conv.channels {
            let xc = &trace.input[c * time..(c + 1) * time];
            let base = (f * conv.channels + c) * width;
            for k in 0..width {
                gconv.weight[base + k] += dot(&ga, &xc[k..k + len]);
            }
        }
    }
}

pub fn projector_forward(params: &ModelParams, concat: &[f64]) -> Result<(Vec<f64>, ProjectorTrace)> {
    let cfg = &params.config;
    if concat.len() != cfg.views * cfg.d_low {
        return Err(Error::Shape(format!(
            "projector input has length {}, expected {}",
            concat.len(),
            cfg.views * cfg.d_low
        )));
    }
    let layers = &params.projector.layers;
    let pre1 = layers[0].forward(concat);
    let h1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
    let pre2 = layers[1].forward(&h1);
    let h2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
    let z = layers[2].forward(&h2);
    Ok((
        z,
        ProjectorTrace {
            input: concat.to_vec(),
            pre: [pre1, pre2],
            hidden: vec![h1, h2],
        },
    ))
}

/// Accumulates projector gradients and returns `∂/∂concat`.
fn projector_backward(
    params: &ModelParams,
    trace: &ProjectorTrace,
    grad_z: &[f64],
    grads: &mut ModelGrads,
) -> Vec<f64> {
    let layers = &params.projector.layers;
    let gl = &mut grads.projector.layers;
    let mut g = layers[2].backward(&trace.hidden[1], grad_z, &mut gl[2], true);
    for (gi, &p) in g.iter_mut().zip(&trace.pre[1]) {
        if p <= 0.0 {
            *gi = 0.0;
        }
    }
    let mut g = layers[1].backward(&trace.hidden[0], &g, &mut gl[1], true);
    for (gi, &p) in g.iter_mut().zip(&trace.pre[0]) {
        if p <= 0.0 {
            *gi = 0.0;
        }
    }
    layers[0].backward(&trace.input, &g, &mut gl[0], true)
}

/// Per-instance traces of a batch forward pass.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    generation: u64,
    instances: Vec<(Vec<EncoderTrace>, ProjectorTrace)>,
}

/// Low-level features `s` (`N × T × d_low`, flattened) and summaries `z` (`N × d_high`).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub n: usize,
    pub views: usize,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

/// Encodes every view with the shared encoder and fuses each instance's views.
pub fn forward_batch(params: &ModelParams, batch: &[ViewSet]) -> Result<(BatchOutput, BatchTrace)> {
    let cfg = &params.config;
    let per_instance = batch
        .par_iter()
        .map(|vs| {
            if vs.views.len() != cfg.views {
                return Err(Error::Shape(format!(
                    "view set has {} views, model expects {}",
                    vs.views.len(),
                    cfg.views
                )));
            }
            let mut s = Vec::with_capacity(cfg.views * cfg.d_low);
            let mut enc = Vec::with_capacity(cfg.views);
            for v in &vs.views {
                let (feat, tr) = encoder_forward(params, v)?;
                s.extend(feat);
                enc.push(tr);
            }
            let (z, ptr) = projector_forward(params, &s)?;
            Ok((s, z, enc, ptr))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = BatchOutput {
        n: batch.len(),
        views: cfg.views,
        s: Vec::with_capacity(batch.len() * cfg.views * cfg.d_low),
        z: Vec::with_capacity(batch.len() * cfg.d_high),
    };
    let mut instances = Vec::with_capacity(batch.len());
    for (s, z, enc, ptr) in per_instance {
        out.s.extend(s);
        out.z.extend(z);
        instances.push((enc, ptr));
    }
    Ok((
        out,
        BatchTrace {
            generation: params.generation,
            instances,
        },
    ))
}

/// Gradients of `Σ⟨grad_s, S⟩ + Σ⟨grad_z, Z⟩` with respect to all parameters.
pub fn model_backward(
    params: &ModelParams,
    trace: &BatchTrace,
    grad_s: &[f64],
    grad_z: &[f64],
) -> Result<ModelGrads> {
    if trace.generation != params.generation {
        return Err(Error::StaleTrace);
    }
    let cfg = &params.config;
    let n = trace.instances.len();
    let (s_len, z_len) = (cfg.views * cfg.d_low, cfg.d_high);
    if grad_s.len() != n * s_len || grad_z.len() != n * z_len {
        return Err(Error::Shape(format!(
            "upstream gradients have lengths {} and {}, expected {} and {}",
            grad_s.len(),
            grad_z.len(),
            n * s_len,
            n * z_len
        )));
    }
    let partials: Vec<ModelGrads> = trace
        .instances
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(chunk, items)| {
            let mut grads = params.zeros_like();
            for (k, (enc, ptr)) in items.iter().enumerate() {
                let i = chunk * GRAD_CHUNK + k;
                let gz = &grad_z[i * z_len..(i + 1) * z_len];
                let mut gs = projector_backward(params, ptr, gz, &mut grads);
                for (a, b) in gs.iter_mut().zip(&grad_s[i * s_len..(i + 1) * s_len]) {
                    *a += b;
                }
                for (t, tr) in enc.iter().enumerate() {
                    encoder_backward(params, tr, &gs[t * cfg.d_low..(t + 1) * cfg.d_low], &mut grads);
                }
            }
            grads
        })
        .collect();
    let mut total = params.zeros_like();
    for p in &partials {
        total.add_assign(p);
    }
    total.generation = 0;
    Ok(total)
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes parameters: magic, version, config, then every tensor as
/// little-endian f64 in declaration order.
pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 8 * params.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for v in [
        c.channels,
        c.time,
        c.views,
        c.d_low,
        c.d_high,
        c.conv_width,
        c.conv_maps,
        c.pool,
        c.projector_hidden,
        c.encoder_hidden.len(),
    ] {
        push_u32(&mut out, v);
    }
    for &h in &c.encoder_hidden {
        push_u32(&mut out, h);
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Cursor over checkpoint bytes.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let b = self.take(8 * out.len())?;
        for (o, c) in out.iter_mut().zip(b.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }

    pub fn remaining(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

/// Inverse of [`encode_params`]; trailing bytes are left in the reader.
pub fn decode_params(reader: &mut Reader<'_>) -> Result<ModelParams> {
    if reader.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = reader.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 10];
    for v in f.iter_mut() {
        *v = reader.u32()?;
    }
    if f[9] > 64 {
        return Err(Error::Checkpoint("implausible encoder depth".into()));
    }
    let encoder_hidden = (0..f[9]).map(|_| reader.u32()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        channels: f[0],
        time: f[1],
        views: f[2],
        d_low: f[3],
        d_high: f[4],
        conv_width: f[5],
        conv_maps: f[6],
        pool: f[7],
        projector_hidden: f[8],
        encoder_hidden,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    let mut params = ModelParams::zeros(&config);
    for t in params.tensors_mut() {
        reader.f64s(t)?;
    }
    params.generation = 0;
    if params.tensors().iter().flat_map(|t| t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(params)
}
