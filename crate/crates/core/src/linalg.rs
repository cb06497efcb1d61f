//! Dense symmetric linear algebra for the correlation statistics.
//!
//! Everything here is small (dimensions in the tens) and evaluated once per
//! training step, so the routines are plain row-major loops with a fixed
//! summation order. Results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};

/// Default diagonal regularization added before factorization.
pub const DEFAULT_JITTER: f64 = 1e-4;

/// Number of times the jitter is multiplied by ten after a failed factorization.
const JITTER_ESCALATIONS: usize = 3;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RectMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RectMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> RectMatrix {
        RectMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &RectMatrix) -> Result<RectMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = RectMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

/// Dense symmetric matrix, stored in full.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = v;
        }
        m
    }

    /// Wraps a square matrix, rejecting asymmetry beyond 1e-12 relative.
    pub fn from_rect(m: RectMatrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::Shape(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let scale = m.data.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..m.rows {
            for j in (i + 1)..m.cols {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            dim: m.rows,
            data: m.data,
        })
    }

    /// Builds from the upper triangle of `f`, mirroring into the lower one.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rect(&self) -> RectMatrix {
        RectMatrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    pub fn scaled(&self, c: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn with_jitter(&self, jitter: f64) -> SymMatrix {
        let mut m = self.clone();
        for i in 0..self.dim {
            m.data[i * self.dim + i] += jitter;
        }
        m
    }

    /// Assembles `[[a, p], [pᵀ, b]]`.
    pub fn block(a: &SymMatrix, p: &RectMatrix, b: &SymMatrix) -> Result<SymMatrix> {
        if p.rows != a.dim || p.cols != b.dim {
            return Err(Error::Shape(format!(
                "off-diagonal block {}x{} does not fit diagonal blocks {} and {}",
                p.rows, p.cols, a.dim, b.dim
            )));
        }
        let (d1, d2) = (a.dim, b.dim);
        let n = d1 + d2;
        let mut m = SymMatrix::zeros(n);
        for i in 0..d1 {
            m.data[i * n..i * n + d1].copy_from_slice(&a.data[i * d1..(i + 1) * d1]);
            for j in 0..d2 {
                let v = p.get(i, j);
                m.data[i * n + d1 + j] = v;
                m.data[(d1 + j) * n + i] = v;
            }
        }
        for i in 0..d2 {
            let row = (d1 + i) * n + d1;
            m.data[row..row + d2].copy_from_slice(&b.data[i * d2..(i + 1) * d2]);
        }
        Ok(m)
    }

    /// Root mean square of the off-diagonal entries.
    pub fn offdiag_rms(&self) -> f64 {
        let n = self.dim;
        if n < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += self.get(i, j).powi(2);
                }
            }
        }
        (acc / (n * (n - 1)) as f64).sqrt()
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = m + jitter·I`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factors `m + jitter·I` at exactly the given jitter.
    pub fn factor(m: &SymMatrix, jitter: f64) -> Result<Self> {
        let n = m.dim;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = m.get(j, j) + jitter;
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite);
            }
            let ljj = diag.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut v = m.get(i, j);
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / ljj;
            }
        }
        Ok(Self {
            dim: n,
            lower: l,
            jitter,
        })
    }

    /// Factors with the jitter escalated ×10 up to three times on failure.
    /// A zero jitter is never escalated.
    pub fn factor_escalating(m: &SymMatrix, jitter: f64) -> Result<Self> {
        if jitter < 0.0 || !jitter.is_finite() {
            return Err(Error::InvalidArgument(format!("jitter must be >= 0, got {jitter}")));
        }
        let mut j = jitter;
        let attempts = if jitter > 0.0 { JITTER_ESCALATIONS + 1 } else { 1 };
        for _ in 0..attempts {
            match Self::factor(m, j) {
                Ok(c) => return Ok(c),
                Err(_) => j *= 10.0,
            }
        }
        Err(Error::NotPositiveDefinite)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Jitter that was actually applied.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn logdet(&self) -> f64 {
        let n = self.dim;
        2.0 * (0..n).map(|i| self.lower[i * n + i].ln()).sum::<f64>()
    }

    /// `(m + jitter·I)⁻¹`, symmetrized.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim;
        // Linv by forward substitution, then A⁻¹ = Linvᵀ Linv.
        let mut linv = vec![0.0; n * n];
        for col in 0..n {
            linv[col * n + col] = 1.0 / self.lower[col * n + col];
            for i in (col + 1)..n {
                let mut v = 0.0;
                for k in col..i {
                    v -= self.lower[i * n + k] * linv[k * n + col];
                }
                linv[i * n + col] = v / self.lower[i * n + i];
            }
        }
        SymMatrix::from_fn(n, |i, j| {
            let start = i.max(j);
            (start..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum()
        })
    }
}

/// `log det(m + jitter·I)` via Cholesky, escalating the jitter on failure.
pub fn logdet_pd(m: &SymMatrix, jitter: f64) -> Result<f64> {
    Ok(Cholesky::factor_escalating(m, jitter)?.logdet())
}

/// `(1/N) Σᵢ xᵢ xᵢᵀ` over the rows of `features`.
pub fn second_moment(features: &RectMatrix) -> Result<SymMatrix> {
    if features.rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = features.cols;
    let mut acc = vec![0.0; d * d];
    for i in 0..features.rows {
        accumulate_outer(&mut acc, features.row(i), features.row(i));
    }
    let inv_n = 1.0 / features.rows as f64;
    Ok(SymMatrix::from_fn(d, |i, j| acc[i * d + j] * inv_n))
}

/// `(1/N) Σᵢ aᵢ bᵢᵀ`.
pub fn cross_moment(a: &RectMatrix, b: &RectMatrix) -> Result<RectMatrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "cross moment needs equal row counts, got {} and {}",
            a.rows, b.rows
        )));
    }
    if a.rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut acc = vec![0.0; a.cols * b.cols];
    for i in 0..a.rows {
        accumulate_outer(&mut acc, a.row(i), b.row(i));
    }
    let inv_n = 1.0 / a.rows as f64;
    acc.iter_mut().for_each(|v| *v *= inv_n);
    RectMatrix::from_vec(a.cols, b.cols, acc)
}

/// `acc += x yᵀ` for a row-major `|x| × |y|` accumulator.
#[inline]
pub(crate) fn accumulate_outer(acc: &mut [f64], x: &[f64], y: &[f64]) {
    let w = y.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (a, &yj) in acc[i * w..(i + 1) * w].iter_mut().zip(y) {
            *a += xi * yj;
        }
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of a row-major matrix.
pub fn symmetric_eigen(m: &SymMatrix) -> (Vec<f64>, RectMatrix) {
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = SymMatrix::identity(n).data;
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = RectMatrix::from_fn(n, n, |r, c| v[r * n + order[c]]);
    (values, vectors)
}

/// `(m + jitter·I)^{-1/2}` with eigenvalues floored at `jitter`.
pub fn inverse_sqrt(m: &SymMatrix, jitter: f64) -> Result<SymMatrix> {
    let (values, vectors) = symmetric_eigen(m);
    let floor = jitter.max(f64::MIN_POSITIVE);
    let mut scale = Vec::with_capacity(values.len());
    for &lambda in &values {
        let shifted = lambda + jitter;
        if shifted <= 0.0 && jitter == 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        scale.push(1.0 / shifted.max(floor).sqrt());
    }
    let n = m.dim;
    Ok(SymMatrix::from_fn(n, |i, j| {
        (0..n)
            .map(|k| vectors.get(i, k) * scale[k] * vectors.get(j, k))
            .sum()
    }))
}

/// Canonical correlations, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaSpectrum {
    rhos: Vec<f64>,
    /// `log(1 − ρₖ²)`, kept separately so values near `ρ = 1` keep their
    /// precision.
    log_residuals: Vec<f64>,
}

impl CcaSpectrum {
    pub fn rhos(&self) -> &[f64] {
        &self.rhos
    }

    pub fn max(&self) -> f64 {
        self.rhos.first().copied().unwrap_or(0.0)
    }

    /// `log(1 − ρₖ²)` per correlation, in the order of [`Self::rhos`].
    pub fn log_residuals(&self) -> &[f64] {
        &self.log_residuals
    }

    /// `Σ log(1 − ρₖ²)`.
    pub fn log_det_ratio(&self) -> f64 {
        self.log_residuals.iter().sum()
    }
}

/// Singular values of `(r1+εI)^{-1/2} p12 (r2+εI)^{-1/2}`.
///
/// With the joint factor `[[L₁₁, 0], [L₂₁, L₂₂]]` of the jittered block
/// matrix, `1 − ρₖ² = 1 / (1 + σₖ²)` where `σₖ` are the singular values of
/// `L₂₂⁻¹ L₂₁`, so no `1 − ρ²` cancellation occurs.
pub fn canonical_correlations(
    r1: &SymMatrix,
    r2: &SymMatrix,
    p12: &RectMatrix,
    jitter: f64,
) -> Result<CcaSpectrum> {
    if p12.rows != r1.dim || p12.cols != r2.dim {
        return Err(Error::Shape(format!(
            "cross block {}x{} does not match {} and {}",
            p12.rows, p12.cols, r1.dim, r2.dim
        )));
    }
    let (d1, d2) = (r1.dim, r2.dim);
    let d = d1 + d2;
    // Positive definiteness is checked at the requested jitter, not escalated.
    let joint = Cholesky::factor(&SymMatrix::block(r1, p12, r2)?, jitter)?;
    let l = &joint.lower;
    // B = L₂₂⁻¹ L₂₁ by forward substitution, one column at a time.
    let mut b = RectMatrix::zeros(d2, d1);
    for c in 0..d1 {
        for i in 0..d2 {
            let mut v = l[(d1 + i) * d + c];
            for k in 0..i {
                v -= l[(d1 + i) * d + d1 + k] * b.get(k, c);
            }
            b.set(i, c, v / l[(d1 + i) * d + d1 + i]);
        }
    }
    let gram = if d1 <= d2 {
        b.transpose().matmul(&b)?
    } else {
        b.matmul(&b.transpose())?
    };
    let gram = SymMatrix::from_fn(gram.rows, |i, j| 0.5 * (gram.get(i, j) + gram.get(j, i)));
    let (values, _) = symmetric_eigen(&gram);
    let sigma_sq: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    Ok(CcaSpectrum {
        rhos: sigma_sq.iter().map(|&v| (v / (1.0 + v)).sqrt()).collect(),
        log_residuals: sigma_sq.iter().map(|&v| -v.ln_1p()).collect(),
    })
}
