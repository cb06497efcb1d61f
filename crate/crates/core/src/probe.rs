//! Linear probe on frozen encoder features.

use rayon::prelude::*;
use serde::Serialize;

use crate::augment::Signal;
use crate::data::{loso_splits, SegmentSource};
use crate::error::{Error, Result};
use crate::linalg::RectMatrix;
use crate::model::{encode_params, encoder_forward, ModelParams};
use crate::training::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub lr: f64,
    /// Stop once the loss changes by less than this between iterations.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iters: 500,
            lr: 0.1,
            tol: 1e-7,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, "must be > 0"))
            }
        };
        positive("probe_l2", self.l2)?;
        positive("probe_lr", self.lr)?;
        positive("probe_tol", self.tol)?;
        if self.max_iters == 0 {
            return Err(Error::config("probe_iters", "must be > 0"));
        }
        Ok(())
    }
}

/// Multinomial logistic regression: `logits = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// classes × dim, row-major.
    pub weight: RectMatrix,
    pub bias: Vec<f64>,
}

impl ProbeModel {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|k| self.bias[k] + dot(self.weight.row(k), x))
            .collect()
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hex digest of the serialized parameters.
pub fn params_checksum(params: &ModelParams) -> String {
    sha256_hex(&encode_params(params))
}

/// Encoder features of the raw segments at `indices`, one row each.
pub fn extract_features<S: SegmentSource + ?Sized>(
    params: &ModelParams,
    source: &S,
    indices: &[usize],
) -> Result<RectMatrix> {
    let (c, t) = source.shape();
    if c != params.config.channels || t != params.config.time {
        return Err(Error::Shape(format!(
            "data is {c}x{t}, model expects {}x{}",
            params.config.channels, params.config.time
        )));
    }
    let rows = indices
        .par_iter()
        .map(|&i| {
            let signal = Signal::from_f32(c, t, source.samples(i))?;
            encoder_forward(params, &signal).map(|(s, _)| s)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = params.config.d_low;
    RectMatrix::from_vec(indices.len(), d, rows.concat())
}

/// Result of [`fit_logistic`].
#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub model: ProbeModel,
    /// Objective value before each update.
    pub losses: Vec<f64>,
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    logits.iter_mut().for_each(|l| *l /= sum);
}

/// Full-batch gradient descent on mean cross-entropy plus `(l2/2)‖W‖²`,
/// starting from zero.
pub fn fit_logistic(
    features: &RectMatrix,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    cfg.validate()?;
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} feature rows but {} labels", labels.len())));
    }
    if features.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite probe features".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    let first = labels.first().copied();
    if first.is_none() || labels.iter().all(|&y| Some(y) == first) {
        return Err(Error::InvalidArgument("probe needs at least two classes".into()));
    }

    let mut model = ProbeModel {
        weight: RectMatrix::zeros(classes, d),
        bias: vec![0.0; classes],
    };
    let mut losses = Vec::new();
    let mut gw = vec![0.0; classes * d];
    let mut gb = vec![0.0; classes];
    for _ in 0..cfg.max_iters {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let x = features.row(i);
            let mut p = model.logits(x);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss -= p[y] - lse;
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for k in 0..classes {
                gb[k] += p[k];
                let row = &mut gw[k * d..(k + 1) * d];
                row.iter_mut().zip(x).for_each(|(g, xi)| *g += p[k] * xi);
            }
        }
        let w = model.weight.as_slice();
        loss = loss / n as f64 + 0.5 * cfg.l2 * dot(w, w);
        let converged = losses.last().is_some_and(|prev: &f64| (prev - loss).abs() < cfg.tol);
        losses.push(loss);
        if converged {
            break;
        }
        let mut new_w = w.to_vec();
        for (j, wj) in new_w.iter_mut().enumerate() {
            *wj -= cfg.lr * (gw[j] / n as f64 + cfg.l2 * *wj);
        }
        model.weight = RectMatrix::from_vec(classes, d, new_w)?;
        for k in 0..classes {
            model.bias[k] -= cfg.lr * gb[k] / n as f64;
        }
    }
    Ok(ProbeFit { model, losses })
}

/// Accuracy summary of a probe on labelled features.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// NaN for classes absent from `labels`.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(model: &ProbeModel, features: &RectMatrix, labels: &[usize]) -> Result<Evaluation> {
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.cols() != model.weight.cols() {
        return Err(Error::Shape("feature width does not match the probe".into()));
    }
    let k = model.classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} outside {k} classes")));
        }
        confusion[y][model.predict(features.row(i))] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = if labels.is_empty() {
        f64::NAN
    } else {
        correct as f64 / labels.len() as f64
    };
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Ok(Evaluation {
        accuracy,
        per_class_accuracy,
        confusion,
    })
}

/// Per-column affine map fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Columns with standard deviation below 1e-12 are centred only.
    pub fn fit(x: &RectMatrix) -> Self {
        let (n, d) = (x.rows().max(1) as f64, x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &RectMatrix) -> RectMatrix {
        RectMatrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) * self.scale[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectResult {
    pub subject: u32,
    pub accuracy: f64,
    pub test_segments: usize,
    pub evaluation: Evaluation,
}

/// Per-subject accuracies with their unweighted mean and population
/// standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LosoReport {
    pub subjects: Vec<SubjectResult>,
    pub mean: f64,
    pub std: f64,
}

impl LosoReport {
    pub fn from_subjects(subjects: Vec<SubjectResult>) -> Self {
        let n = subjects.len() as f64;
        let mean = subjects.iter().map(|s| s.accuracy).sum::<f64>() / n;
        let std = (subjects.iter().map(|s| (s.accuracy - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { subjects, mean, std }
    }

    /// `subject,accuracy` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,accuracy\n");
        for s in &self.subjects {
            out.push_str(&format!("{},{:.6}\n", s.subject, s.accuracy));
        }
        out
    }
}

fn labels_of<S: SegmentSource + ?Sized>(source: &S, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            source
                .label(i)
                .ok_or_else(|| Error::InvalidArgument(format!("segment {i} has no label")))
        })
        .collect()
}

/// Fits a probe on the train subjects of each split and scores it on the
/// held-out subject. `params` supplies the encoder for a held-out subject.
pub fn loso_evaluate<S, F>(source: &S, mut params: F, cfg: &ProbeConfig) -> Result<LosoReport>
where
    S: SegmentSource + ?Sized,
    F: FnMut(u32) -> Result<ModelParams>,
{
    cfg.validate()?;
    let splits = loso_splits(source)?;
    let all: Vec<usize> = (0..source.len()).collect();
    let classes = labels_of(source, &all)?.into_iter().max().map_or(0, |m| m + 1);
    let mut subjects = Vec::with_capacity(splits.len());
    for split in &splits {
        let p = params(split.held_out_subject)?;
        let train_x = extract_features(&p, source, &split.train_indices)?;
        let test_x = extract_features(&p, source, &split.test_indices)?;
        let scaler = Standardizer::fit(&train_x);
        let fit = fit_logistic(
            &scaler.apply(&train_x),
            &labels_of(source, &split.train_indices)?,
            classes,
            cfg,
        )?;
        let evaluation = evaluate(
            &fit.model,
            &scaler.apply(&test_x),
            &labels_of(source, &split.test_indices)?,
        )?;
        subjects.push(SubjectResult {
            subject: split.held_out_subject,
            accuracy: evaluation.accuracy,
            test_segments: split.test_indices.len(),
            evaluation,
        });
    }
    Ok(LosoReport::from_subjects(subjects))
}
