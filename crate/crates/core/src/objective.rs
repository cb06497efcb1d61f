//! Correlation statistics between view features and fused summaries, the
//! log-determinant dependence loss, the cross-instance contrastive
//! regularizer, their sum, and analytic gradients of that sum with respect to
//! the raw features.
//!
//! With `S` the per-view features (`N × T × d`) and `Z` the summaries
//! (`N × d`), the statistics are
//!
//! ```text
//! R₁ = mean_{i,t} s_it s_itᵀ     R₂ = mean_i z_i z_iᵀ     P = mean_{i,t} s_it z_iᵀ
//! R₁₂ = [[R₁, P], [Pᵀ, R₂]]
//! L_logdet = log det R₁₂ − log det R₁ − log det R₂
//! L_cont   = 1/(N(N−1)) Σ_i Σ_{j≠i} exp(s̄_i · z_j / τ)
//! ```
//!
//! `R₁₂` is the second moment of the stacked pairs `(s_it, z_i)`, so it is
//! PSD and `L_logdet ≤ 0` at zero jitter (Fischer's inequality).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    accumulate_outer, canonical_correlations, Cholesky, RectMatrix, SymMatrix, DEFAULT_JITTER,
};

/// Coordinates whose second moment falls below this are left unscaled.
pub const MIN_SECOND_MOMENT: f64 = 1e-12;

/// Features of one batch. `s` is `n × t × d_low` flattened instance-major,
/// `z` is `n × d_high`, `s_bar` is the per-instance mean over views.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    n: usize,
    t: usize,
    d_low: usize,
    d_high: usize,
    s: Vec<f64>,
    z: Vec<f64>,
    s_bar: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(n: usize, t: usize, d_low: usize, d_high: usize, s: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if t == 0 || d_low == 0 || d_high == 0 {
            return Err(Error::Shape("views and feature widths must be positive".into()));
        }
        if s.len() != n * t * d_low || z.len() != n * d_high {
            return Err(Error::Shape(format!(
                "features of lengths {} and {} do not match n={n}, t={t}, d_low={d_low}, d_high={d_high}",
                s.len(),
                z.len()
            )));
        }
        let s_bar = view_means(&s, n, t, d_low);
        Ok(Self {
            n,
            t,
            d_low,
            d_high,
            s,
            z,
            s_bar,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn views(&self) -> usize {
        self.t
    }

    pub fn d_low(&self) -> usize {
        self.d_low
    }

    pub fn d_high(&self) -> usize {
        self.d_high
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn s_bar(&self) -> &[f64] {
        &self.s_bar
    }

    /// Feature of view `t` of instance `i`.
    pub fn s_at(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.t + t) * self.d_low;
        &self.s[start..start + self.d_low]
    }

    pub fn z_at(&self, i: usize) -> &[f64] {
        &self.z[i * self.d_high..(i + 1) * self.d_high]
    }

    pub fn s_bar_at(&self, i: usize) -> &[f64] {
        &self.s_bar[i * self.d_low..(i + 1) * self.d_low]
    }

    #[cfg(test)]
    fn s_matrix(&self) -> RectMatrix {
        RectMatrix::from_vec(self.n * self.t, self.d_low, self.s.clone()).expect("shape checked")
    }

    fn z_matrix(&self) -> RectMatrix {
        RectMatrix::from_vec(self.n, self.d_high, self.z.clone()).expect("shape checked")
    }
}

fn view_means(s: &[f64], n: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    let inv_t = 1.0 / t as f64;
    for i in 0..n {
        let dst = &mut out[i * d..(i + 1) * d];
        for v in 0..t {
            let src = &s[(i * t + v) * d..(i * t + v + 1) * d];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        dst.iter_mut().for_each(|a| *a *= inv_t);
    }
    out
}

/// Per-coordinate scales applied by [`normalize_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub s_scale: Vec<f64>,
    pub z_scale: Vec<f64>,
    /// Coordinates left unscaled because their second moment was ~0.
    pub s_unscaled: Vec<usize>,
    pub z_unscaled: Vec<usize>,
}

fn unit_moment_scales(data: &[f64], d: usize) -> (Vec<f64>, Vec<usize>) {
    let rows = data.len() / d;
    let mut m = vec![0.0; d];
    for row in data.chunks_exact(d) {
        m.iter_mut().zip(row).for_each(|(a, v)| *a += v * v);
    }
    let mut unscaled = Vec::new();
    let scales = m
        .iter()
        .enumerate()
        .map(|(k, &acc)| {
            let moment = acc / rows as f64;
            if moment < MIN_SECOND_MOMENT {
                unscaled.push(k);
                1.0
            } else {
                1.0 / moment.sqrt()
            }
        })
        .collect();
    (scales, unscaled)
}

fn apply_scales(data: &[f64], scales: &[f64]) -> Vec<f64> {
    data.chunks_exact(scales.len())
        .flat_map(|row| row.iter().zip(scales).map(|(v, a)| v * a))
        .collect()
}

/// Rescales every coordinate of `s` (pooled over all instances and views) and
/// of `z` (over instances) to unit second moment.
pub fn normalize_features(batch: &FeatureBatch) -> Result<(FeatureBatch, Normalization)> {
    let (s_scale, s_unscaled) = unit_moment_scales(&batch.s, batch.d_low);
    let (z_scale, z_unscaled) = unit_moment_scales(&batch.z, batch.d_high);
    let out = FeatureBatch::new(
        batch.n,
        batch.t,
        batch.d_low,
        batch.d_high,
        apply_scales(&batch.s, &s_scale),
        apply_scales(&batch.z, &z_scale),
    )?;
    Ok((
        out,
        Normalization {
            s_scale,
            z_scale,
            s_unscaled,
            z_unscaled,
        },
    ))
}

/// Chain rule through `u = x / sqrt(mean(x²))` for each coordinate.
fn normalization_backward(raw: &[f64], normed: &[f64], grad: &[f64], scales: &[f64], unscaled: &[usize]) -> Vec<f64> {
    let d = scales.len();
    let rows = raw.len() / d;
    let mut proj = vec![0.0; d];
    for (g, u) in grad.chunks_exact(d).zip(normed.chunks_exact(d)) {
        proj.iter_mut().zip(g.iter().zip(u)).for_each(|(p, (g, u))| *p += g * u);
    }
    proj.iter_mut().for_each(|p| *p /= rows as f64);
    for &k in unscaled {
        proj[k] = 0.0;
    }
    let mut out = vec![0.0; raw.len()];
    for ((o, g), u) in out.chunks_exact_mut(d).zip(grad.chunks_exact(d)).zip(normed.chunks_exact(d)) {
        for k in 0..d {
            o[k] = scales[k] * (g[k] - u[k] * proj[k]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStats {
    pub r1: SymMatrix,
    pub r2: SymMatrix,
    pub p12: RectMatrix,
    pub r12: SymMatrix,
}

impl CorrelationStats {
    pub fn from_blocks(r1: SymMatrix, r2: SymMatrix, p12: RectMatrix) -> Result<Self> {
        let r12 = SymMatrix::block(&r1, &p12, &r2)?;
        Ok(Self { r1, r2, p12, r12 })
    }
}

pub fn hfmca_stats(batch: &FeatureBatch) -> Result<CorrelationStats> {
    let (n, t, dl, dh) = (batch.n, batch.t, batch.d_low, batch.d_high);
    let mut r1 = vec![0.0; dl * dl];
    let mut p12 = vec![0.0; dl * dh];
    for i in 0..n {
        let z = batch.z_at(i);
        for v in 0..t {
            let s = batch.s_at(i, v);
            accumulate_outer(&mut r1, s, s);
            accumulate_outer(&mut p12, s, z);
        }
    }
    let inv_nt = 1.0 / (n * t) as f64;
    let r1 = SymMatrix::from_fn(dl, |a, b| r1[a * dl + b] * inv_nt);
    p12.iter_mut().for_each(|v| *v *= inv_nt);
    let r2 = crate::linalg::second_moment(&batch.z_matrix())?;
    CorrelationStats::from_blocks(r1, r2, RectMatrix::from_vec(dl, dh, p12)?)
}

/// Cholesky factors of the three jittered matrices, sharing one jitter.
struct LogdetFactors {
    joint: Cholesky,
    low: Cholesky,
    high: Cholesky,
}

impl LogdetFactors {
    fn new(stats: &CorrelationStats, jitter: f64) -> Result<Self> {
        // The joint matrix is factored first; its (possibly escalated)
        // jitter is then reused so all three determinants see the same εI.
        let joint = Cholesky::factor_escalating(&stats.r12, jitter)?;
        let j = joint.jitter();
        Ok(Self {
            joint,
            low: Cholesky::factor_escalating(&stats.r1, j)?,
            high: Cholesky::factor_escalating(&stats.r2, j)?,
        })
    }

    fn value(&self) -> f64 {
        self.joint.logdet() - self.low.logdet() - self.high.logdet()
    }
}

/// `log det(R₁₂+εI) − log det(R₁+εI) − log det(R₂+εI)`.
pub fn logdet_loss(stats: &CorrelationStats, jitter: f64) -> Result<f64> {
    Ok(LogdetFactors::new(stats, jitter)?.value())
}

fn check_contrastive(batch: &FeatureBatch) -> Result<()> {
    if batch.n < 2 {
        return Err(Error::ContrastiveBatch);
    }
    if batch.d_low != batch.d_high {
        return Err(Error::Shape(format!(
            "contrastive term needs d_low == d_high, got {} and {}",
            batch.d_low, batch.d_high
        )));
    }
    Ok(())
}

/// Mean of `exp(clamp(s̄_i·z_j/τ))` over ordered pairs `i ≠ j`.
pub fn contrastive_reg(batch: &FeatureBatch, tau: f64, clamp: f64) -> Result<f64> {
    check_contrastive(batch)?;
    let n = batch.n;
    let mut acc = 0.0;
    for i in 0..n {
        let sb = batch.s_bar_at(i);
        for j in (0..n).filter(|&j| j != i) {
            let arg = (dot(sb, batch.z_at(j)) / tau).clamp(-clamp, clamp);
            acc += arg.exp();
        }
    }
    Ok(acc / (n * (n - 1)) as f64)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
    pub jitter: f64,
    pub normalize_features: bool,
    pub exp_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 0.5,
            jitter: DEFAULT_JITTER,
            normalize_features: true,
            exp_clamp: 50.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda", "must be >= 0"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", "must be > 0"));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::config("jitter", "must be >= 0"));
        }
        if !(self.exp_clamp > 0.0) {
            return Err(Error::config("exp_clamp", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossComponents {
    pub logdet: f64,
    /// Reported even when `lambda == 0`; `NaN` when the batch has one instance.
    pub cont: f64,
}

fn prepared(batch: &FeatureBatch, cfg: &LossConfig) -> Result<(FeatureBatch, Option<Normalization>)> {
    if cfg.normalize_features {
        let (b, norm) = normalize_features(batch)?;
        Ok((b, Some(norm)))
    } else {
        Ok((batch.clone(), None))
    }
}

fn components_of(batch: &FeatureBatch, cfg: &LossConfig) -> Result<LossComponents> {
    let logdet = logdet_loss(&hfmca_stats(batch)?, cfg.jitter)?;
    let cont = if cfg.lambda > 0.0 || batch.n >= 2 {
        contrastive_reg(batch, cfg.tau, cfg.exp_clamp)?
    } else {
        f64::NAN
    };
    Ok(LossComponents { logdet, cont })
}

fn combine(c: LossComponents, lambda: f64) -> f64 {
    if lambda == 0.0 {
        c.logdet
    } else {
        c.logdet + lambda * c.cont
    }
}

/// `L_logdet + λ·L_cont`, after feature normalization when enabled.
pub fn total_loss(batch: &FeatureBatch, cfg: &LossConfig) -> Result<(f64, LossComponents)> {
    let (b, _) = prepared(batch, cfg)?;
    let c = components_of(&b, cfg)?;
    Ok((combine(c, cfg.lambda), c))
}

/// Loss value, its parts, and gradients with respect to the raw `s` and `z`.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub total: f64,
    pub components: LossComponents,
    pub grad_s: Vec<f64>,
    pub grad_z: Vec<f64>,
    /// Contrastive part of `grad_z` alone (before the λ weight and before
    /// the normalization chain rule).
    pub grad_z_cont: Vec<f64>,
}

/// Gradients of [`total_loss`] with respect to every `s[i,t]` and `z[i]`.
pub fn loss_gradients(batch: &FeatureBatch, cfg: &LossConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let e = evaluate(batch, cfg)?;
    Ok((e.grad_s, e.grad_z))
}

/// Value and gradients of [`total_loss`] in one pass.
pub fn evaluate(batch: &FeatureBatch, cfg: &LossConfig) -> Result<LossEvaluation> {
    let (b, norm) = prepared(batch, cfg)?;
    let (n, t, dl, dh) = (b.n, b.t, b.d_low, b.d_high);
    let stats = hfmca_stats(&b)?;
    let factors = LogdetFactors::new(&stats, cfg.jitter)?;
    let logdet = factors.value();

    // ∂L/∂R₁₂ = (R₁₂+εI)⁻¹; subtract the diagonal-block inverses.
    let a = factors.joint.inverse();
    let inv1 = factors.low.inverse();
    let inv2 = factors.high.inverse();
    let g1 = SymMatrix::from_fn(dl, |p, q| a.get(p, q) - inv1.get(p, q));
    let g2 = SymMatrix::from_fn(dh, |p, q| a.get(dl + p, dl + q) - inv2.get(p, q));
    // P appears in both off-diagonal blocks.
    let gp = RectMatrix::from_fn(dl, dh, |p, q| 2.0 * a.get(p, dl + q));

    let inv_nt = 1.0 / (n * t) as f64;
    let inv_n = 1.0 / n as f64;
    let mut grad_s = vec![0.0; n * t * dl];
    let mut grad_z = vec![0.0; n * dh];
    for i in 0..n {
        let z = b.z_at(i);
        let gz = &mut grad_z[i * dh..(i + 1) * dh];
        for q in 0..dh {
            gz[q] += 2.0 * inv_n * (0..dh).map(|r| g2.get(q, r) * z[r]).sum::<f64>();
        }
        for v in 0..t {
            let s = b.s_at(i, v);
            let gs = &mut grad_s[(i * t + v) * dl..(i * t + v + 1) * dl];
            for p in 0..dl {
                let from_r1: f64 = (0..dl).map(|r| g1.get(p, r) * s[r]).sum();
                let from_p: f64 = (0..dh).map(|q| gp.get(p, q) * z[q]).sum();
                gs[p] += 2.0 * inv_nt * from_r1 + inv_nt * from_p;
            }
            for q in 0..dh {
                gz[q] += inv_nt * (0..dl).map(|p| gp.get(p, q) * s[p]).sum::<f64>();
            }
        }
    }

    let mut grad_z_cont = vec![0.0; n * dh];
    let cont = if cfg.lambda > 0.0 || n >= 2 {
        check_contrastive(&b)?;
        let kappa = 1.0 / (n * (n - 1)) as f64;
        let mut acc = 0.0;
        let mut grad_sbar = vec![0.0; n * dl];
        for i in 0..n {
            let sb = b.s_bar_at(i);
            for j in (0..n).filter(|&j| j != i) {
                let zj = b.z_at(j);
                let raw = dot(sb, zj) / cfg.tau;
                let arg = raw.clamp(-cfg.exp_clamp, cfg.exp_clamp);
                let e = arg.exp();
                acc += e;
                if raw.abs() < cfg.exp_clamp {
                    let w = kappa * e / cfg.tau;
                    for k in 0..dl {
                        grad_sbar[i * dl + k] += w * zj[k];
                        grad_z_cont[j * dh + k] += w * sb[k];
                    }
                }
            }
        }
        if cfg.lambda > 0.0 {
            let inv_t = 1.0 / t as f64;
            for i in 0..n {
                for v in 0..t {
                    let gs = &mut grad_s[(i * t + v) * dl..(i * t + v + 1) * dl];
                    for k in 0..dl {
                        gs[k] += cfg.lambda * inv_t * grad_sbar[i * dl + k];
                    }
                }
            }
            for (g, c) in grad_z.iter_mut().zip(&grad_z_cont) {
                *g += cfg.lambda * c;
            }
        }
        acc * kappa
    } else {
        f64::NAN
    };

    let (grad_s, grad_z) = match &norm {
        Some(nrm) => (
            normalization_backward(&batch.s, &b.s, &grad_s, &nrm.s_scale, &nrm.s_unscaled),
            normalization_backward(&batch.z, &b.z, &grad_z, &nrm.z_scale, &nrm.z_unscaled),
        ),
        None => (grad_s, grad_z),
    };
    let components = LossComponents { logdet, cont };
    Ok(LossEvaluation {
        total: combine(components, cfg.lambda),
        components,
        grad_s,
        grad_z,
        grad_z_cont,
    })
}

/// Spectrum and collapse diagnostics of one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub rhos: Vec<f64>,
    pub rho_max: f64,
    pub offdiag_rms_r1: f64,
    pub offdiag_rms_r2: f64,
    /// Variance of each `z` coordinate across the batch.
    pub z_var: Vec<f64>,
    pub z_var_min: f64,
    /// `|L_logdet − Σ log(1 − ρₖ²)|`.
    pub cca_residual: f64,
    pub loss_logdet: f64,
    pub unscaled_s: Vec<usize>,
    pub unscaled_z: Vec<usize>,
}

impl Diagnostics {
    pub fn collapsed(&self) -> bool {
        self.z_var_min <= 1e-12
    }
}

/// Diagnostics of the batch the loss sees (normalized when enabled).
pub fn diagnostics(batch: &FeatureBatch, cfg: &LossConfig) -> Result<Diagnostics> {
    let (b, norm) = prepared(batch, cfg)?;
    let stats = hfmca_stats(&b)?;
    let factors = LogdetFactors::new(&stats, cfg.jitter)?;
    let loss_logdet = factors.value();
    let spectrum = canonical_correlations(&stats.r1, &stats.r2, &stats.p12, factors.joint.jitter())?;
    let (n, dh) = (b.n, b.d_high);
    let z_var: Vec<f64> = (0..dh)
        .map(|k| {
            let mean = (0..n).map(|i| b.z_at(i)[k]).sum::<f64>() / n as f64;
            (0..n).map(|i| (b.z_at(i)[k] - mean).powi(2)).sum::<f64>() / n as f64
        })
        .collect();
    let z_var_min = z_var.iter().copied().fold(f64::INFINITY, f64::min);
    let (unscaled_s, unscaled_z) = norm.map_or((Vec::new(), Vec::new()), |n| (n.s_unscaled, n.z_unscaled));
    Ok(Diagnostics {
        rho_max: spectrum.max(),
        cca_residual: (loss_logdet - spectrum.log_det_ratio()).abs(),
        rhos: spectrum.rhos().to_vec(),
        offdiag_rms_r1: stats.r1.offdiag_rms(),
        offdiag_rms_r2: stats.r2.offdiag_rms(),
        z_var,
        z_var_min,
        loss_logdet,
        unscaled_s,
        unscaled_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_batch() -> FeatureBatch {
        FeatureBatch::new(2, 2, 1, 1, vec![1.0, -1.0, 2.0, 0.0], vec![1.0, 2.0]).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> FeatureBatch {
        let s = (0..n * t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureBatch::new(n, t, d, d, s, z).unwrap()
    }

    fn plain(lambda: f64, jitter: f64) -> LossConfig {
        LossConfig {
            lambda,
            jitter,
            normalize_features: false,
            ..LossConfig::default()
        }
    }

    #[test]
    fn scalar_stats_by_hand() {
        let st = hfmca_stats(&scalar_batch()).unwrap();
        assert!((st.r1.get(0, 0) - 1.5).abs() < 1e-15);
        assert!((st.r2.get(0, 0) - 2.5).abs() < 1e-15);
        assert!((st.p12.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(st.r12.as_slice(), &[1.5, 1.0, 1.0, 2.5]);
        let l = logdet_loss(&st, 0.0).unwrap();
        assert!((l - (2.75f64 / 3.75).ln()).abs() < 1e-12);
        assert!((l + 0.310155).abs() < 1e-6);
    }

    #[test]
    fn zero_summaries_give_zero_cross() {
        let b = FeatureBatch::new(2, 2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![0.0; 4]).unwrap();
        let st = hfmca_stats(&b).unwrap();
        assert!(st.p12.as_slice().iter().all(|&v| v == 0.0));
        assert!(st.r2.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_view_reduces_to_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_batch(&mut rng, 6, 1, 3);
        let st = hfmca_stats(&b).unwrap();
        let m = crate::linalg::second_moment(&b.s_matrix()).unwrap();
        for p in 0..3 {
            for q in 0..3 {
                assert!((st.r1.get(p, q) - m.get(p, q)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logdet_scalar_cases() {
        let st = CorrelationStats::from_blocks(
            SymMatrix::identity(1),
            SymMatrix::identity(1),
            RectMatrix::from_vec(1, 1, vec![0.6]).unwrap(),
        )
        .unwrap();
        let l = logdet_loss(&st, 0.0).unwrap();
        assert!((l - 0.64f64.ln()).abs() < 1e-12);
        assert!((l + 0.446287).abs() < 1e-6);

        let ind = CorrelationStats::from_blocks(
            SymMatrix::identity(3),
            SymMatrix::identity(2),
            RectMatrix::zeros(3, 2),
        )
        .unwrap();
        assert_eq!(logdet_loss(&ind, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn logdet_slack_bounded_at_default_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b = random_batch(&mut rng, 8, 3, 4);
            let st = hfmca_stats(&b).unwrap();
            assert!(logdet_loss(&st, 0.0).unwrap() <= 1e-12);
            assert!(logdet_loss(&st, DEFAULT_JITTER).unwrap() <= 1e-3);
        }
    }

    #[test]
    fn contrastive_cases() {
        // Orthogonal s̄ and z: every cross dot product is 0.
        let b = FeatureBatch::new(2, 1, 2, 2, vec![1.0, 0.0, 2.0, 0.0], vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        for tau in [0.1, 1.0, 7.0] {
            assert_eq!(contrastive_reg(&b, tau, 50.0).unwrap(), 1.0);
        }
        // s̄ = [0, 1] from views {[-1, 1], [3, -1]}; z = [1, 2].
        let b = FeatureBatch::new(2, 2, 1, 1, vec![-1.0, 1.0, 3.0, -1.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(b.s_bar(), &[0.0, 1.0]);
        let c = contrastive_reg(&b, 1.0, 50.0).unwrap();
        assert!((c - (1.0 + 1f64.exp()) / 2.0).abs() < 1e-12);
        assert!((c - 1.859141).abs() < 1e-6);

        let mut prev = f64::INFINITY;
        for tau in [1.0, 10.0, 100.0, 1e4, 1e8] {
            let v = contrastive_reg(&b, tau, 50.0).unwrap();
            assert!(v < prev && v >= 1.0);
            prev = v;
        }
        assert!((prev - 1.0).abs() < 1e-6);

        let one = FeatureBatch::new(1, 2, 1, 1, vec![1.0, 2.0], vec![1.0]).unwrap();
        assert!(matches!(contrastive_reg(&one, 1.0, 50.0), Err(Error::ContrastiveBatch)));
    }

    #[test]
    fn contrastive_clamps_exponent() {
        let b = FeatureBatch::new(2, 1, 1, 1, vec![100.0, 100.0], vec![100.0, 100.0]).unwrap();
        let c = contrastive_reg(&b, 0.5, 50.0).unwrap();
        assert_eq!(c, 50f64.exp());
    }

    #[test]
    fn total_loss_combines_components() {
        let b = scalar_batch();
        let unit_tau = |lambda| LossConfig { tau: 1.0, ..plain(lambda, 0.0) };
        let (t0, c0) = total_loss(&b, &unit_tau(0.0)).unwrap();
        assert_eq!(t0.to_bits(), c0.logdet.to_bits());
        let (t1, c1) = total_loss(&b, &unit_tau(1.0)).unwrap();
        // s̄ = [0, 1], z = [1, 2] for this batch as well.
        assert!((c1.cont - (1.0 + 1f64.exp()) / 2.0).abs() < 1e-12);
        assert!((t1 - (-0.310155 + c1.cont)).abs() < 1e-6);
        let (t2, _) = total_loss(&b, &unit_tau(2.0)).unwrap();
        assert!((t2 - t1 - c1.cont).abs() < 1e-12);
    }

    #[test]
    fn normalization_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 6, 3, 4);
        let (nb, info) = normalize_features(&b).unwrap();
        let st = hfmca_stats(&nb).unwrap();
        for k in 0..4 {
            assert!((st.r1.get(k, k) - 1.0).abs() < 1e-10);
            assert!((st.r2.get(k, k) - 1.0).abs() < 1e-10);
        }
        assert!(info.s_unscaled.is_empty());
        let (again, _) = normalize_features(&nb).unwrap();
        for (a, b) in again.s().iter().zip(nb.s()) {
            assert!((a - b).abs() < 1e-12);
        }
        let scaled = FeatureBatch::new(6, 3, 4, 4, b.s().iter().map(|v| 10.0 * v).collect(), b.z().to_vec()).unwrap();
        let (ns, _) = normalize_features(&scaled).unwrap();
        for (a, b) in ns.s().iter().zip(nb.s()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut s = b.s().to_vec();
        for row in s.chunks_exact_mut(4) {
            row[2] = 0.0;
        }
        let degenerate = FeatureBatch::new(6, 3, 4, 4, s, b.z().to_vec()).unwrap();
        assert_eq!(normalize_features(&degenerate).unwrap().1.s_unscaled, vec![2]);
    }

    fn perturbed(b: &FeatureBatch, in_s: bool, k: usize, h: f64) -> FeatureBatch {
        let mut s = b.s().to_vec();
        let mut z = b.z().to_vec();
        if in_s {
            s[k] += h;
        } else {
            z[k] += h;
        }
        FeatureBatch::new(b.n(), b.views(), b.d_low(), b.d_high(), s, z).unwrap()
    }

    fn max_fd_error(b: &FeatureBatch, cfg: &LossConfig, h: f64) -> f64 {
        let (gs, gz) = loss_gradients(b, cfg).unwrap();
        let mut worst: f64 = 0.0;
        for (in_s, g) in [(true, &gs), (false, &gz)] {
            for (k, &a) in g.iter().enumerate() {
                let fp = total_loss(&perturbed(b, in_s, k, h), cfg).unwrap().0;
                let fm = total_loss(&perturbed(b, in_s, k, -h), cfg).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for normalize in [false, true] {
            for lambda in [0.0, 1.0] {
                let b = random_batch(&mut rng, 4, 3, 3);
                let cfg = LossConfig {
                    lambda,
                    normalize_features: normalize,
                    ..LossConfig::default()
                };
                let err = max_fd_error(&b, &cfg, 1e-6);
                assert!(err < 1e-5, "normalize={normalize} lambda={lambda}: {err}");
            }
        }
    }

    #[test]
    fn independent_features_gradient() {
        // Views of each instance cancel, so s̄ = 0 and P = 0.
        let s = vec![1.0, 0.5, -1.0, -0.5, 2.0, -1.0, -2.0, 1.0];
        let z = vec![0.3, 1.0, 1.2, -3.0];
        let b = FeatureBatch::new(2, 2, 2, 2, s, z).unwrap();
        let st = hfmca_stats(&b).unwrap();
        assert!(st.p12.as_slice().iter().all(|&v| v == 0.0));
        let cfg = plain(0.0, 1e-3);
        assert!(max_fd_error(&b, &cfg, 1e-6) < 1e-6);
    }

    #[test]
    fn doubling_lambda_doubles_contrastive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_batch(&mut rng, 5, 2, 3);
        let g0 = evaluate(&b, &plain(0.0, DEFAULT_JITTER)).unwrap();
        let g1 = evaluate(&b, &plain(1.0, DEFAULT_JITTER)).unwrap();
        let g2 = evaluate(&b, &plain(2.0, DEFAULT_JITTER)).unwrap();
        for k in 0..g0.grad_z.len() {
            let d1 = g1.grad_z[k] - g0.grad_z[k];
            let d2 = g2.grad_z[k] - g0.grad_z[k];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
            assert!((d1 - g1.grad_z_cont[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn diagnostics_cases() {
        let cfg = plain(0.0, 0.0);
        let d = diagnostics(&scalar_batch(), &cfg).unwrap();
        assert!((d.rho_max - 0.516398).abs() < 1e-6);
        assert!(d.cca_residual < 1e-10);

        // Identity moments with no cross moment.
        let r = 2f64.sqrt();
        let s = vec![r, 0.0, -r, 0.0, 0.0, r, 0.0, -r];
        let z = vec![1.0, 1.0, 1.0, -1.0];
        let b = FeatureBatch::new(2, 2, 2, 2, s, z).unwrap();
        let d = diagnostics(&b, &cfg).unwrap();
        assert!(d.rhos.iter().all(|&r| r == 0.0));
        assert_eq!(d.offdiag_rms_r1, 0.0);
        assert_eq!(d.offdiag_rms_r2, 0.0);

        let collapsed = FeatureBatch::new(3, 1, 2, 2, vec![1.0, 2.0, 3.0, 1.0, 2.0, 5.0], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let d = diagnostics(&collapsed, &LossConfig { jitter: 1e-4, ..LossConfig::default() }).unwrap();
        assert_eq!(d.z_var_min, 0.0);
        assert!(d.collapsed());
    }

    #[test]
    fn contrastive_symmetric_under_instance_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_batch(&mut rng, 5, 2, 3);
        let perm = [3, 0, 4, 1, 2];
        let mut s = Vec::new();
        let mut z = Vec::new();
        for &i in &perm {
            for v in 0..2 {
                s.extend_from_slice(b.s_at(i, v));
            }
            z.extend_from_slice(b.z_at(i));
        }
        let pb = FeatureBatch::new(5, 2, 3, 3, s, z).unwrap();
        let a = contrastive_reg(&b, 0.5, 50.0).unwrap();
        let c = contrastive_reg(&pb, 0.5, 50.0).unwrap();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn batch_shape_errors() {
        assert!(matches!(FeatureBatch::new(0, 1, 1, 1, vec![], vec![]), Err(Error::EmptyBatch)));
        assert!(FeatureBatch::new(2, 2, 2, 2, vec![0.0; 7], vec![0.0; 4]).is_err());
        let b = FeatureBatch::new(2, 1, 2, 3, vec![0.0; 4], vec![0.0; 6]).unwrap();
        assert!(contrastive_reg(&b, 1.0, 50.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::{prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn logdet_is_non_positive(seed in 0u64..5000, n in 6usize..20, t in 1usize..4, d in 1usize..4) {
                let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), n, t, d);
                let loss = logdet_loss(&hfmca_stats(&b).unwrap(), 0.0).unwrap();
                prop_assert!(loss <= 1e-10, "loss {}", loss);
            }

            #[test]
            fn lambda_zero_is_exact_and_linear(seed in 0u64..5000, n in 3usize..8, d in 1usize..4) {
                let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), n, 2, d);
                let cfg = |lambda| LossConfig { lambda, ..LossConfig::default() };
                let (t0, c0) = total_loss(&b, &cfg(0.0)).unwrap();
                prop_assert_eq!(t0.to_bits(), c0.logdet.to_bits());
                let (t1, c1) = total_loss(&b, &cfg(1.0)).unwrap();
                let (t2, _) = total_loss(&b, &cfg(2.0)).unwrap();
                prop_assert!(((t2 - t1) - c1.cont).abs() <= 1e-9 * c1.cont.abs().max(1.0));
            }

            #[test]
            fn contrastive_is_permutation_symmetric(seed in 0u64..5000, n in 2usize..7, d in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = random_batch(&mut rng, n, 2, d);
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let b = &b;
                let s = perm.iter().flat_map(|&i| (0..2).flat_map(move |t| b.s_at(i, t).to_vec())).collect();
                let z = perm.iter().flat_map(|&i| b.z_at(i).to_vec()).collect();
                let p = FeatureBatch::new(n, 2, d, d, s, z).unwrap();
                let (a, c) = (contrastive_reg(b, 0.5, 50.0).unwrap(), contrastive_reg(&p, 0.5, 50.0).unwrap());
                prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
            }

            #[test]
            fn normalization_is_scale_invariant(seed in 0u64..5000, c in 0.01f64..100.0) {
                let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 5, 2, 3);
                let scaled = FeatureBatch::new(5, 2, 3, 3, b.s().iter().map(|v| v * c).collect(), b.z().to_vec()).unwrap();
                let (x, _) = normalize_features(&b).unwrap();
                let (y, _) = normalize_features(&scaled).unwrap();
                for (u, v) in x.s().iter().zip(y.s()) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }
}
