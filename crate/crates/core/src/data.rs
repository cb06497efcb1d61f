//! Segments, datasets, the on-disk dataset format, synthetic data and
//! leave-one-subject-out splits.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const RECORDING_MAGIC: &[u8; 4] = b"HFMC";
pub const RECORDING_VERSION: u8 = 1;
pub const MANIFEST_NAME: &str = "manifest";
const MANIFEST_HEADER: &str = "# file subject_id trial_id label channels samples rate_hz";

/// Shortest window, in samples, accepted anywhere in the pipeline.
pub const MIN_WINDOW: usize = 8;

/// One fixed-length multichannel window, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EegSegment {
    channels: usize,
    time: usize,
    samples: Vec<f32>,
    pub rate_hz: f64,
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: Option<usize>,
}

impl EegSegment {
    pub fn new(
        channels: usize,
        time: usize,
        samples: Vec<f32>,
        rate_hz: f64,
        subject_id: u32,
        trial_id: u32,
        label: Option<usize>,
    ) -> Result<Self> {
        if channels == 0 || time < MIN_WINDOW {
            return Err(Error::Shape(format!(
                "segment must have >= 1 channel and >= {MIN_WINDOW} samples, got {channels}x{time}"
            )));
        }
        if samples.len() != channels * time {
            return Err(Error::Shape(format!(
                "{} samples cannot fill {channels}x{time}",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sample".into()));
        }
        if !(rate_hz > 0.0) || !rate_hz.is_finite() {
            return Err(Error::InvalidArgument(format!("bad sampling rate {rate_hz}")));
        }
        Ok(Self {
            channels,
            time,
            samples,
            rate_hz,
            subject_id,
            trial_id,
            label,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.time..(c + 1) * self.time]
    }

    /// Per-channel standardization to zero mean and unit variance.
    /// Constant channels are only centered.
    pub fn zscore(&mut self) {
        for c in 0..self.channels {
            let row = &mut self.samples[c * self.time..(c + 1) * self.time];
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = if var > 1e-20 { 1.0 / var.sqrt() } else { 1.0 };
            for v in row.iter_mut() {
                *v = ((*v as f64 - mean) * inv) as f32;
            }
        }
    }
}

/// Metadata attached to every window cut out of one recording.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordingMeta {
    pub rate_hz: f64,
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: Option<usize>,
}

/// Cuts a channel-major recording into consecutive non-overlapping windows.
/// The trailing partial window is dropped.
pub fn segment_trials(
    recording: &[f32],
    channels: usize,
    window_samples: usize,
    meta: RecordingMeta,
) -> Result<Vec<EegSegment>> {
    if window_samples < MIN_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "window must be >= {MIN_WINDOW} samples, got {window_samples}"
        )));
    }
    if channels == 0 || recording.len() % channels != 0 {
        return Err(Error::Shape(format!(
            "{} samples do not split into {channels} channels",
            recording.len()
        )));
    }
    let total = recording.len() / channels;
    let count = total / window_samples;
    (0..count)
        .map(|w| {
            let mut samples = Vec::with_capacity(channels * window_samples);
            for c in 0..channels {
                let start = c * total + w * window_samples;
                samples.extend_from_slice(&recording[start..start + window_samples]);
            }
            EegSegment::new(
                channels,
                window_samples,
                samples,
                meta.rate_hz,
                meta.subject_id,
                meta.trial_id,
                meta.label,
            )
        })
        .collect()
}

/// Immutable collection of equally shaped segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    segments: Vec<EegSegment>,
    class_count: usize,
    subject_ids: Vec<u32>,
}

impl Dataset {
    pub fn new(segments: Vec<EegSegment>, class_count: usize) -> Result<Self> {
        if let Some(first) = segments.first() {
            for (i, s) in segments.iter().enumerate() {
                if s.channels != first.channels || s.time != first.time {
                    return Err(Error::Format(format!(
                        "segment {i} has shape {}x{}, expected {}x{}",
                        s.channels, s.time, first.channels, first.time
                    )));
                }
                if s.rate_hz != first.rate_hz {
                    return Err(Error::Format(format!(
                        "segment {i} has rate {} Hz, expected {}",
                        s.rate_hz, first.rate_hz
                    )));
                }
                if let Some(l) = s.label {
                    if l >= class_count {
                        return Err(Error::Format(format!(
                            "segment {i} label {l} outside [0, {class_count})"
                        )));
                    }
                }
            }
        }
        let subject_ids = segments
            .iter()
            .map(|s| s.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            segments,
            class_count,
            subject_ids,
        })
    }

    pub fn segments(&self) -> &[EegSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn subject_ids(&self) -> &[u32] {
        &self.subject_ids
    }

    /// `(channels, time)` of every segment, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.segments.first().map(|s| (s.channels, s.time))
    }

    pub fn zscored(mut self) -> Self {
        self.segments.iter_mut().for_each(EegSegment::zscore);
        self
    }
}

/// Read access to segments, as seen by pretraining and evaluation.
pub trait SegmentSource: Sync {
    fn len(&self) -> usize;
    fn samples(&self, index: usize) -> &[f32];
    fn subject_id(&self, index: usize) -> u32;
    fn label(&self, index: usize) -> Option<usize>;
    /// `(channels, time)`; every segment shares it.
    fn shape(&self) -> (usize, usize);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Called by LOSO pretraining before each split. No-op by default.
    fn begin_split(&self, _held_out_subject: u32) {}
}

impl SegmentSource for Dataset {
    fn len(&self) -> usize {
        self.segments.len()
    }

    fn samples(&self, index: usize) -> &[f32] {
        &self.segments[index].samples
    }

    fn subject_id(&self, index: usize) -> u32 {
        self.segments[index].subject_id
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.segments[index].label
    }

    fn shape(&self) -> (usize, usize) {
        self.shape().unwrap_or((0, 0))
    }
}

/// Per-split record of what an [`AccessTracker`] observed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccessLog {
    pub held_out_subject: Option<u32>,
    pub sample_reads: BTreeSet<usize>,
    pub label_reads: usize,
}

/// Wraps a source and records every sample and label read.
pub struct AccessTracker<'a, S: SegmentSource> {
    inner: &'a S,
    logs: Mutex<Vec<AccessLog>>,
}

impl<'a, S: SegmentSource> AccessTracker<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            logs: Mutex::new(vec![AccessLog::default()]),
        }
    }

    /// One log per split started, preceded by a log of reads outside any split.
    pub fn logs(&self) -> Vec<AccessLog> {
        self.logs.lock().expect("tracker lock").clone()
    }

    fn with_current(&self, f: impl FnOnce(&mut AccessLog)) {
        let mut logs = self.logs.lock().expect("tracker lock");
        f(logs.last_mut().expect("at least one log"));
    }
}

impl<S: SegmentSource> SegmentSource for AccessTracker<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn samples(&self, index: usize) -> &[f32] {
        self.with_current(|log| {
            log.sample_reads.insert(index);
        });
        self.inner.samples(index)
    }

    fn subject_id(&self, index: usize) -> u32 {
        self.inner.subject_id(index)
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.with_current(|log| log.label_reads += 1);
        self.inner.label(index)
    }

    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn begin_split(&self, held_out_subject: u32) {
        self.logs.lock().expect("tracker lock").push(AccessLog {
            held_out_subject: Some(held_out_subject),
            ..AccessLog::default()
        });
    }
}

/// Options applied while reading a dataset directory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Standardize every channel of every segment.
    pub zscore: bool,
    /// Cut each recording into windows of this many samples. `None` keeps
    /// every recording as a single segment.
    pub window_samples: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            zscore: true,
            window_samples: None,
        }
    }
}

struct ManifestRecord {
    file: String,
    subject_id: u32,
    trial_id: u32,
    label: Option<usize>,
    channels: usize,
    samples: usize,
    rate_hz: f64,
}

fn parse_manifest_line(line: &str, lineno: usize) -> Result<ManifestRecord> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let bad = |what: &str| Error::Format(format!("manifest line {lineno}: bad {what}"));
    if fields.len() != 7 {
        return Err(Error::Format(format!(
            "manifest line {lineno}: expected 7 fields, got {}",
            fields.len()
        )));
    }
    let label: i64 = fields[3].parse().map_err(|_| bad("label"))?;
    let label = match label {
        -1 => None,
        l if l >= 0 => Some(l as usize),
        _ => return Err(bad("label")),
    };
    Ok(ManifestRecord {
        file: fields[0].to_string(),
        subject_id: fields[1].parse().map_err(|_| bad("subject_id"))?,
        trial_id: fields[2].parse().map_err(|_| bad("trial_id"))?,
        label,
        channels: fields[4].parse().map_err(|_| bad("channels"))?,
        samples: fields[5].parse().map_err(|_| bad("samples"))?,
        rate_hz: fields[6].parse().map_err(|_| bad("rate_hz"))?,
    })
}

fn read_recording(path: &Path, channels: usize, samples: usize) -> Result<Vec<f32>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingRecording(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() < 5 || &bytes[..4] != RECORDING_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    if bytes[4] != RECORDING_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {}",
            path.display(),
            bytes[4]
        )));
    }
    let body = &bytes[5..];
    if body.len() != channels * samples * 4 {
        return Err(Error::Format(format!(
            "{}: shape mismatch, {} bytes for {channels}x{samples}",
            path.display(),
            body.len()
        )));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSample(path.to_path_buf()));
    }
    Ok(values)
}

/// Reads a dataset directory (`manifest` plus one binary file per recording).
pub fn load_dataset(dir: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut segments = Vec::new();
    let mut max_label = None::<usize>;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = parse_manifest_line(line, i + 1)?;
        let values = read_recording(&dir.join(&rec.file), rec.channels, rec.samples)?;
        let meta = RecordingMeta {
            rate_hz: rec.rate_hz,
            subject_id: rec.subject_id,
            trial_id: rec.trial_id,
            label: rec.label,
        };
        if let Some(l) = rec.label {
            max_label = Some(max_label.map_or(l, |m| m.max(l)));
        }
        match opts.window_samples {
            Some(w) => segments.extend(segment_trials(&values, rec.channels, w, meta)?),
            None => segments.push(
                EegSegment::new(
                    rec.channels,
                    rec.samples,
                    values,
                    rec.rate_hz,
                    rec.subject_id,
                    rec.trial_id,
                    rec.label,
                )
                .map_err(|e| Error::Format(format!("{}: {e}", rec.file)))?,
            ),
        }
    }
    let class_count = max_label.map_or(0, |m| m + 1);
    let dataset = Dataset::new(segments, class_count)?;
    Ok(if opts.zscore { dataset.zscored() } else { dataset })
}

/// Writes a dataset directory readable by [`load_dataset`]. Output bytes are a
/// pure function of the dataset.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, seg) in dataset.segments.iter().enumerate() {
        let file = format!("rec_{i:06}.bin");
        let label = seg.label.map_or(-1, |l| l as i64);
        manifest.push_str(&format!(
            "{file} {} {} {label} {} {} {}\n",
            seg.subject_id, seg.trial_id, seg.channels, seg.time, seg.rate_hz
        ));
        let mut bytes = Vec::with_capacity(5 + 4 * seg.samples.len());
        bytes.extend_from_slice(RECORDING_MAGIC);
        bytes.push(RECORDING_VERSION);
        for v in &seg.samples {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_file(&dir.join(file), &bytes)?;
    }
    write_file(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic labeled-signal generator.
///
/// Class `k` on channel `c` carries `a_{k,c} · g_{m,c} · sin(2π f_{k,c} t + φ)`
/// plus white Gaussian noise, where `g_{m,c}` is a per-subject gain drawn
/// uniformly from `1 ± amplitude_jitter` and `φ` is a fresh phase per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub subjects: usize,
    pub segments_per_class: usize,
    pub channels: usize,
    pub rate_hz: f64,
    pub window_sec: f64,
    pub noise_sigma: f64,
    pub amplitude_jitter: f64,
    /// `f_{k,c} = freq_base + k·freq_class_step + c·freq_channel_step` unless
    /// `freq_table` is set.
    pub freq_base: f64,
    pub freq_class_step: f64,
    pub freq_channel_step: f64,
    pub amplitude: f64,
    pub freq_table: Option<Vec<Vec<f64>>>,
    pub amplitude_table: Option<Vec<Vec<f64>>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            subjects: 4,
            segments_per_class: 20,
            channels: 8,
            rate_hz: 200.0,
            window_sec: 2.0,
            noise_sigma: 0.5,
            amplitude_jitter: 0.3,
            freq_base: 6.0,
            freq_class_step: 4.0,
            freq_channel_step: 0.5,
            amplitude: 1.0,
            freq_table: None,
            amplitude_table: None,
        }
    }
}

impl SynthConfig {
    pub fn window_samples(&self) -> usize {
        (self.rate_hz * self.window_sec).round() as usize
    }

    pub fn frequency(&self, class: usize, channel: usize) -> f64 {
        match &self.freq_table {
            Some(t) => t[class][channel],
            None => {
                self.freq_base
                    + class as f64 * self.freq_class_step
                    + channel as f64 * self.freq_channel_step
            }
        }
    }

    pub fn amplitude_of(&self, class: usize, channel: usize) -> f64 {
        match &self.amplitude_table {
            Some(t) => t[class][channel],
            None => self.amplitude,
        }
    }

    /// Checks every field, reporting the first offending one by name.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.subjects < 1 {
            return Err(Error::config("subjects", "need at least 1 subject"));
        }
        if self.segments_per_class < 1 {
            return Err(Error::config("segments_per_class", "must be >= 1"));
        }
        if self.channels < 1 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if !(self.rate_hz > 0.0) {
            return Err(Error::config("rate_hz", "must be positive"));
        }
        if self.window_samples() < MIN_WINDOW {
            return Err(Error::config(
                "window_sec",
                format!("window must cover >= {MIN_WINDOW} samples"),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) {
            return Err(Error::config("amplitude_jitter", "must lie in [0, 1)"));
        }
        for (key, table) in [("freq_table", &self.freq_table), ("amplitude_table", &self.amplitude_table)] {
            if let Some(t) = table {
                if t.len() != self.classes || t.iter().any(|r| r.len() != self.channels) {
                    return Err(Error::config(key, "must be classes x channels"));
                }
            }
        }
        Ok(())
    }
}

/// Generates a labeled synthetic dataset; identical seeds give identical output.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let time = cfg.window_samples();
    let mut segments = Vec::with_capacity(cfg.subjects * cfg.classes * cfg.segments_per_class);
    for subject in 0..cfg.subjects {
        let gains: Vec<f64> = (0..cfg.channels)
            .map(|_| 1.0 + cfg.amplitude_jitter * rng.random_range(-1.0..=1.0))
            .collect();
        let mut trial = 0u32;
        for class in 0..cfg.classes {
            for _ in 0..cfg.segments_per_class {
                let mut samples = Vec::with_capacity(cfg.channels * time);
                for (c, gain) in gains.iter().enumerate() {
                    let f = cfg.frequency(class, c);
                    let a = cfg.amplitude_of(class, c) * gain;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    for n in 0..time {
                        let t = n as f64 / cfg.rate_hz;
                        let clean = a * (std::f64::consts::TAU * f * t + phase).sin();
                        let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        samples.push((clean + eps) as f32);
                    }
                }
                segments.push(EegSegment::new(
                    cfg.channels,
                    time,
                    samples,
                    cfg.rate_hz,
                    subject as u32,
                    trial,
                    Some(class),
                )?);
                trial += 1;
            }
        }
    }
    Dataset::new(segments, cfg.classes)
}

/// One leave-one-subject-out partition of a source's segment indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LosoSplit {
    pub held_out_subject: u32,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// One split per distinct subject, in ascending subject order.
pub fn loso_splits<S: SegmentSource + ?Sized>(source: &S) -> Result<Vec<LosoSplit>> {
    let subjects: BTreeSet<u32> = (0..source.len()).map(|i| source.subject_id(i)).collect();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-subject-out needs >= 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|held_out| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..source.len()).partition(|&i| source.subject_id(i) == held_out);
            LosoSplit {
                held_out_subject: held_out,
                train_indices: train,
                test_indices: test,
            }
        })
        .collect())
}

/// Directory-relative path of recording `i` as written by [`save_dataset`].
pub fn recording_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("rec_{i:06}.bin"))
}
