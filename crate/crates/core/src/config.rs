//! Flat run configuration: every key is a top-level TOML entry, and the same
//! keys can be overridden on the command line.

use std::path::Path;

use toml::{Table, Value};

use crate::data::{LoadOptions, SynthConfig};
use crate::error::{Error, Result};
use crate::probe::ProbeConfig;
use crate::training::TrainConfig;

/// All effective settings of one CLI invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub zscore: bool,
    /// 0 keeps each recording as one segment.
    pub window_samples: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            zscore: true,
            window_samples: 0,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Every accepted key, in the order written to `config.resolved`.
pub const KEYS: &[&str] = &[
    "seed",
    "workers",
    "zscore",
    "window_samples",
    "classes",
    "subjects",
    "segments_per_class",
    "channels",
    "rate_hz",
    "window_sec",
    "noise_sigma",
    "amplitude_jitter",
    "freq_base",
    "freq_class_step",
    "freq_channel_step",
    "amplitude",
    "freq_table",
    "amplitude_table",
    "batch_size",
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "eps_opt",
    "grad_clip",
    "checkpoint_interval",
    "lambda",
    "tau",
    "jitter",
    "normalize_features",
    "exp_clamp",
    "views",
    "swap_fraction",
    "mask_ratio",
    "dropout_fraction",
    "crop_ratio",
    "d_low",
    "d_high",
    "conv_width",
    "conv_maps",
    "pool",
    "encoder_hidden",
    "projector_hidden",
    "probe_l2",
    "probe_iters",
    "probe_lr",
    "probe_tol",
];

fn bad(key: &str, expected: &str, v: &Value) -> Error {
    Error::config(key, format!("expected {expected}, got {v}"))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(bad(key, "a non-negative integer", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, "true or false", v))
}

fn as_list<'a>(key: &str, v: &'a Value) -> Result<&'a [Value]> {
    v.as_array().map(Vec::as_slice).ok_or_else(|| bad(key, "an array", v))
}

fn as_pair(key: &str, v: &Value) -> Result<(f64, f64)> {
    match as_list(key, v)? {
        [a, b] => Ok((as_f64(key, a)?, as_f64(key, b)?)),
        _ => Err(bad(key, "[low, high]", v)),
    }
}

/// An empty array clears the table.
fn as_table(key: &str, v: &Value) -> Result<Option<Vec<Vec<f64>>>> {
    let rows = as_list(key, v)?;
    if rows.is_empty() {
        return Ok(None);
    }
    rows.iter()
        .map(|r| as_list(key, r)?.iter().map(|x| as_f64(key, x)).collect())
        .collect::<Result<_>>()
        .map(Some)
}

fn float(x: f64) -> Value {
    Value::Float(x)
}

fn int(x: u64) -> Value {
    Value::Integer(x as i64)
}

fn pair((a, b): (f64, f64)) -> Value {
    Value::Array(vec![float(a), float(b)])
}

fn table(t: &Option<Vec<Vec<f64>>>) -> Value {
    Value::Array(
        t.iter()
            .flatten()
            .map(|r| Value::Array(r.iter().map(|&x| float(x)).collect()))
            .collect(),
    )
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected with an error naming them.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let (s, t, p) = (&mut self.synth, &mut self.train, &mut self.probe);
        match key {
            "seed" => {
                self.seed = as_u64(key, v)?;
                t.seed = self.seed;
            }
            "workers" => self.workers = as_usize(key, v)?,
            "zscore" => self.zscore = as_bool(key, v)?,
            "window_samples" => self.window_samples = as_usize(key, v)?,
            "classes" => s.classes = as_usize(key, v)?,
            "subjects" => s.subjects = as_usize(key, v)?,
            "segments_per_class" => s.segments_per_class = as_usize(key, v)?,
            "channels" => s.channels = as_usize(key, v)?,
            "rate_hz" => s.rate_hz = as_f64(key, v)?,
            "window_sec" => s.window_sec = as_f64(key, v)?,
            "noise_sigma" => s.noise_sigma = as_f64(key, v)?,
            "amplitude_jitter" => s.amplitude_jitter = as_f64(key, v)?,
            "freq_base" => s.freq_base = as_f64(key, v)?,
            "freq_class_step" => s.freq_class_step = as_f64(key, v)?,
            "freq_channel_step" => s.freq_channel_step = as_f64(key, v)?,
            "amplitude" => s.amplitude = as_f64(key, v)?,
            "freq_table" => s.freq_table = as_table(key, v)?,
            "amplitude_table" => s.amplitude_table = as_table(key, v)?,
            "batch_size" => t.batch_size = as_usize(key, v)?,
            "epochs" => t.epochs = as_usize(key, v)?,
            "lr" => t.lr = as_f64(key, v)?,
            "beta1" => t.beta1 = as_f64(key, v)?,
            "beta2" => t.beta2 = as_f64(key, v)?,
            "eps_opt" => t.eps_opt = as_f64(key, v)?,
            "grad_clip" => t.grad_clip = as_f64(key, v)?,
            "checkpoint_interval" => t.checkpoint_interval = as_u64(key, v)?,
            "lambda" => t.loss.lambda = as_f64(key, v)?,
            "tau" => t.loss.tau = as_f64(key, v)?,
            "jitter" => t.loss.jitter = as_f64(key, v)?,
            "normalize_features" => t.loss.normalize_features = as_bool(key, v)?,
            "exp_clamp" => t.loss.exp_clamp = as_f64(key, v)?,
            "views" => {
                t.aug.views = as_usize(key, v)?;
                t.model.views = t.aug.views;
            }
            "swap_fraction" => t.aug.swap_fraction = as_f64(key, v)?,
            "mask_ratio" => t.aug.mask_ratio = as_pair(key, v)?,
            "dropout_fraction" => t.aug.dropout_fraction = as_pair(key, v)?,
            "crop_ratio" => t.aug.crop_ratio = as_pair(key, v)?,
            "d_low" => t.model.d_low = as_usize(key, v)?,
            "d_high" => t.model.d_high = as_usize(key, v)?,
            "conv_width" => t.model.conv_width = as_usize(key, v)?,
            "conv_maps" => t.model.conv_maps = as_usize(key, v)?,
            "pool" => t.model.pool = as_usize(key, v)?,
            "encoder_hidden" => {
                t.model.encoder_hidden = as_list(key, v)?
                    .iter()
                    .map(|x| as_usize(key, x))
                    .collect::<Result<_>>()?
            }
            "projector_hidden" => t.model.projector_hidden = as_usize(key, v)?,
            "probe_l2" => p.l2 = as_f64(key, v)?,
            "probe_iters" => p.max_iters = as_usize(key, v)?,
            "probe_lr" => p.lr = as_f64(key, v)?,
            "probe_tol" => p.tol = as_f64(key, v)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        let (s, t, p) = (&self.synth, &self.train, &self.probe);
        Some(match key {
            "seed" => int(self.seed),
            "workers" => int(self.workers as u64),
            "zscore" => Value::Boolean(self.zscore),
            "window_samples" => int(self.window_samples as u64),
            "classes" => int(s.classes as u64),
            "subjects" => int(s.subjects as u64),
            "segments_per_class" => int(s.segments_per_class as u64),
            "channels" => int(s.channels as u64),
            "rate_hz" => float(s.rate_hz),
            "window_sec" => float(s.window_sec),
            "noise_sigma" => float(s.noise_sigma),
            "amplitude_jitter" => float(s.amplitude_jitter),
            "freq_base" => float(s.freq_base),
            "freq_class_step" => float(s.freq_class_step),
            "freq_channel_step" => float(s.freq_channel_step),
            "amplitude" => float(s.amplitude),
            "freq_table" => table(&s.freq_table),
            "amplitude_table" => table(&s.amplitude_table),
            "batch_size" => int(t.batch_size as u64),
            "epochs" => int(t.epochs as u64),
            "lr" => float(t.lr),
            "beta1" => float(t.beta1),
            "beta2" => float(t.beta2),
            "eps_opt" => float(t.eps_opt),
            "grad_clip" => float(t.grad_clip),
            "checkpoint_interval" => int(t.checkpoint_interval),
            "lambda" => float(t.loss.lambda),
            "tau" => float(t.loss.tau),
            "jitter" => float(t.loss.jitter),
            "normalize_features" => Value::Boolean(t.loss.normalize_features),
            "exp_clamp" => float(t.loss.exp_clamp),
            "views" => int(t.aug.views as u64),
            "swap_fraction" => float(t.aug.swap_fraction),
            "mask_ratio" => pair(t.aug.mask_ratio),
            "dropout_fraction" => pair(t.aug.dropout_fraction),
            "crop_ratio" => pair(t.aug.crop_ratio),
            "d_low" => int(t.model.d_low as u64),
            "d_high" => int(t.model.d_high as u64),
            "conv_width" => int(t.model.conv_width as u64),
            "conv_maps" => int(t.model.conv_maps as u64),
            "pool" => int(t.model.pool as u64),
            "encoder_hidden" => Value::Array(t.model.encoder_hidden.iter().map(|&h| int(h as u64)).collect()),
            "projector_hidden" => int(t.model.projector_hidden as u64),
            "probe_l2" => float(p.l2),
            "probe_iters" => int(p.max_iters as u64),
            "probe_lr" => float(p.lr),
            "probe_tol" => float(p.tol),
            _ => return None,
        })
    }

    pub fn apply_table(&mut self, table: &Table) -> Result<()> {
        for (key, v) in table {
            self.set(key, v)?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let mut cfg = Self::default();
        cfg.apply_table(&table)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies a command-line override. The text is read as a TOML value and
    /// falls back to a plain string.
    pub fn set_from_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let parsed = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key, &parsed)
    }

    /// Checks every section; the model's channel and time counts are taken
    /// from the data and checked later.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        self.synth.validate()?;
        let mut train = self.train.clone();
        train.model.channels = train.model.channels.max(1);
        train.model.time = train.model.time.max(train.model.conv_width + train.model.pool);
        train.validate()?;
        self.probe.validate()
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            zscore: self.zscore,
            window_samples: (self.window_samples > 0).then_some(self.window_samples),
        }
    }

    /// Canonical TOML text of every key; parsing it back yields `self`.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("listed key");
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }
}
