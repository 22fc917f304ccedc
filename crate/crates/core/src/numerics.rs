//! Dense double-precision kernel: a row-major matrix, embedding vectors,
//! the handful of forward operations the fusion network needs, their
//! closed-form backward passes, and a central-difference gradient checker.

use crate::error::{structural, Error, Result};

/// Default layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(structural(format!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("tensor entry {i} is not finite")));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `out = self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect()
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u) {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, row);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("embedding entry {i} is not finite")));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector { values: vec![0.0; dim] }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        EmbeddingVector { values: vec![value; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-6
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(structural(format!("{what}: dimension mismatch ({a} vs {b})")));
    }
    Ok(())
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len(), "cosine")?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine together with its gradients with respect to both arguments.
pub struct CosineGrad {
    pub value: f64,
    pub d_a: Vec<f64>,
    pub d_b: Vec<f64>,
}

/// Unclamped cosine plus gradients; callers guarantee nonzero norms.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> CosineGrad {
    let (na, nb) = (norm(a), norm(b));
    let inv = 1.0 / (na * nb);
    let value = dot(a, b) * inv;
    let d_a = a.iter().zip(b).map(|(ai, bi)| bi * inv - value * ai / (na * na)).collect();
    let d_b = a.iter().zip(b).map(|(ai, bi)| ai * inv - value * bi / (nb * nb)).collect();
    CosineGrad { value, d_a, d_b }
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::Domain("cannot normalize a zero vector".into()));
    }
    Ok(EmbeddingVector { values: v.values.iter().map(|x| x / n).collect() })
}

pub fn l2_normalize_in_place(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::Domain("cannot normalize a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

pub fn layer_norm(
    x: &EmbeddingVector,
    gain: &EmbeddingVector,
    bias: &EmbeddingVector,
    eps: f64,
) -> Result<EmbeddingVector> {
    check_dims(x.dim(), gain.dim(), "layer_norm gain")?;
    check_dims(x.dim(), bias.dim(), "layer_norm bias")?;
    if x.dim() == 0 {
        return Err(structural("layer_norm of an empty vector"));
    }
    let cache = LayerNormCache::forward(x.values(), eps)?;
    Ok(EmbeddingVector { values: cache.output(gain.values(), bias.values()) })
}

/// Intermediate values of a layer-norm forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

impl LayerNormCache {
    pub fn forward(x: &[f64], eps: f64) -> Result<Self> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Domain("layer_norm of a constant vector with eps = 0".into()));
        }
        let inv_std = 1.0 / denom;
        Ok(LayerNormCache { normalized: x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std })
    }

    pub fn output(&self, gain: &[f64], bias: &[f64]) -> Vec<f64> {
        self.normalized.iter().zip(gain).zip(bias).map(|((x, g), b)| g * x + b).collect()
    }

    /// Returns the gradient w.r.t. the layer-norm input and accumulates the
    /// affine gradients.
    pub fn backward(
        &self,
        d_out: &[f64],
        gain: &[f64],
        d_gain: &mut [f64],
        d_bias: &mut [f64],
    ) -> Vec<f64> {
        let n = d_out.len() as f64;
        let mut d_hat = Vec::with_capacity(d_out.len());
        for i in 0..d_out.len() {
            d_gain[i] += d_out[i] * self.normalized[i];
            d_bias[i] += d_out[i];
            d_hat.push(d_out[i] * gain[i]);
        }
        let mean_d = d_hat.iter().sum::<f64>() / n;
        let mean_dx = dot(&d_hat, &self.normalized) / n;
        d_hat
            .iter()
            .zip(&self.normalized)
            .map(|(dh, xh)| self.inv_std * (dh - mean_d - xh * mean_dx))
            .collect()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A flat view over a set of trainable values, used by the gradient checker.
pub trait Parameters: Clone {
    fn flatten(&self) -> Vec<f64>;
    fn unflatten(&mut self, flat: &[f64]);
    fn entry_name(&self, index: usize) -> String;
}

impl Parameters for Vec<f64> {
    fn flatten(&self) -> Vec<f64> {
        self.clone()
    }

    fn unflatten(&mut self, flat: &[f64]) {
        self.copy_from_slice(flat);
    }

    fn entry_name(&self, index: usize) -> String {
        format!("p[{index}]")
    }
}

#[derive(Debug, Clone)]
pub struct GradientEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradientReport {
    pub fn flagged(&self) -> impl Iterator<Item = &GradientEntry> {
        self.entries.iter().filter(move |e| e.relative_error > self.tolerance)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }

    pub fn worst(&self) -> Option<&GradientEntry> {
        self.entries.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences, entry by entry.
///
/// `loss_fn` returns the loss and its analytic gradient (in the same flat
/// layout as `params`). The relative error is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<P, F>(loss_fn: F, params: &P, step: f64, tol: f64) -> Result<GradientReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<(f64, P)>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (_, grad) = loss_fn(params)?;
    let analytic = grad.flatten();
    let base = params.flatten();
    if analytic.len() != base.len() {
        return Err(structural("analytic gradient layout differs from parameters"));
    }
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut entries = Vec::with_capacity(base.len());
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.unflatten(&flat);
        let (plus, _) = loss_fn(&probe)?;
        flat[i] = base[i] - step;
        probe.unflatten(&flat);
        let (minus, _) = loss_fn(&probe)?;
        flat[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss when perturbing {}",
                params.entry_name(i)
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let relative_error = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(relative_error);
        entries.push(GradientEntry { name: params.entry_name(i), analytic: analytic[i], numeric, relative_error });
    }
    Ok(GradientReport { entries, max_relative_error: max_err, tolerance: tol })
}
