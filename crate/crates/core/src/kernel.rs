//! Stacking kernels, forward passes, losses and their gradients.
//!
//! Kernels store *raw* parameters. The weights actually applied to logits are
//! the elementwise `max(raw, 0)`, so every effective weight is non-negative and
//! a raw value at or below zero switches its snapshot off entirely.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::episode::LogitTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fes,
    ConFes,
    ReFes,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fes => "fes",
            Method::ConFes => "confes",
            Method::ReFes => "refes",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fes" => Ok(Method::Fes),
            "confes" => Ok(Method::ConFes),
            "refes" => Ok(Method::ReFes),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Flat `K x J` stacking kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FesKernel {
    pub raw: Array2<f64>,
}

impl FesKernel {
    pub fn new(raw: Array2<f64>) -> Self {
        Self { raw }
    }

    pub fn constant(k: usize, j: usize, value: f64) -> Self {
        Self::new(Array2::from_elem((k, j), value))
    }

    pub fn effective(&self) -> Array2<f64> {
        self.raw.mapv(relu)
    }
}

/// Two-level kernel: a per-extractor strided 1D convolution over the snapshot
/// axis followed by a global kernel over the resulting feature maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConFesKernel {
    /// `K x J_b` depthwise convolution weights.
    pub depthwise: Array2<f64>,
    /// `K x J_m` weights over the convolution outputs.
    pub global: Array2<f64>,
    pub stride: usize,
    /// Snapshot count `J` the kernel covers.
    pub n_snapshots: usize,
}

/// Feature-map length `(J - J_b) / T + 1`, or a configuration error when the
/// windows do not tile the snapshot axis exactly.
pub fn feature_map_len(n_snapshots: usize, conv_size: usize, stride: usize) -> Result<usize> {
    if stride == 0 || conv_size < stride || n_snapshots < conv_size {
        return Err(Error::Config(format!(
            "ConFES needs J >= J_b >= T >= 1, got J={n_snapshots}, J_b={conv_size}, T={stride}"
        )));
    }
    if (n_snapshots - conv_size) % stride != 0 {
        return Err(Error::Config(format!(
            "ConFES needs (J - J_b) divisible by T, got J={n_snapshots}, J_b={conv_size}, T={stride}"
        )));
    }
    Ok((n_snapshots - conv_size) / stride + 1)
}

impl ConFesKernel {
    pub fn new(
        depthwise: Array2<f64>,
        global: Array2<f64>,
        stride: usize,
        n_snapshots: usize,
    ) -> Result<Self> {
        let (k, conv_size) = depthwise.dim();
        let map_len = feature_map_len(n_snapshots, conv_size, stride)?;
        if global.dim() != (k, map_len) {
            return Err(Error::Shape(format!(
                "global kernel is {:?}, expected ({k}, {map_len})",
                global.dim()
            )));
        }
        Ok(Self {
            depthwise,
            global,
            stride,
            n_snapshots,
        })
    }

    pub fn constant(
        k: usize,
        n_snapshots: usize,
        conv_size: usize,
        stride: usize,
        value: f64,
    ) -> Result<Self> {
        let map_len = feature_map_len(n_snapshots, conv_size, stride)?;
        Self::new(
            Array2::from_elem((k, conv_size), value),
            Array2::from_elem((k, map_len), value),
            stride,
            n_snapshots,
        )
    }

    pub fn n_extractors(&self) -> usize {
        self.depthwise.nrows()
    }

    pub fn conv_size(&self) -> usize {
        self.depthwise.ncols()
    }

    pub fn map_len(&self) -> usize {
        self.global.ncols()
    }

    /// `K * (J_m + J_b)`.
    pub fn param_count(&self) -> usize {
        self.depthwise.len() + self.global.len()
    }
}

/// Flat `K x J` effective weights equivalent to the two-level hierarchy.
///
/// Snapshot `j` collects one term per convolution window covering it, so with
/// overlapping windows (`J_b > T`) some columns are sums of two or more
/// products.
pub fn expand_confes(kernel: &ConFesKernel) -> Array2<f64> {
    let k = kernel.n_extractors();
    let mut w = Array2::zeros((k, kernel.n_snapshots));
    for ki in 0..k {
        for m in 0..kernel.map_len() {
            let g = relu(kernel.global[[ki, m]]);
            for b in 0..kernel.conv_size() {
                w[[ki, kernel.stride * m + b]] += g * relu(kernel.depthwise[[ki, b]]);
            }
        }
    }
    w
}

/// Either kernel family behind one parameter-vector interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    Flat(FesKernel),
    Conv(ConFesKernel),
}

impl Kernel {
    /// Number of multiplicative levels in the hierarchy.
    pub fn levels(&self) -> u32 {
        match self {
            Kernel::Flat(_) => 1,
            Kernel::Conv(_) => 2,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Kernel::Flat(k) => k.raw.len(),
            Kernel::Conv(k) => k.param_count(),
        }
    }

    /// `(K, J)` of the logits this kernel consumes.
    pub fn input_shape(&self) -> (usize, usize) {
        match self {
            Kernel::Flat(k) => k.raw.dim(),
            Kernel::Conv(k) => (k.n_extractors(), k.n_snapshots),
        }
    }

    /// Raw parameters, depthwise before global for the two-level kernel.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Kernel::Flat(k) => k.raw.iter().copied().collect(),
            Kernel::Conv(k) => k.depthwise.iter().chain(k.global.iter()).copied().collect(),
        }
    }

    /// Same structure with parameters replaced, in [`Kernel::params`] order.
    pub fn with_params(&self, params: &[f64]) -> Kernel {
        assert_eq!(params.len(), self.param_count(), "parameter count");
        match self {
            Kernel::Flat(k) => Kernel::Flat(FesKernel::new(
                Array2::from_shape_vec(k.raw.dim(), params.to_vec()).expect("shape"),
            )),
            Kernel::Conv(k) => {
                let split = k.depthwise.len();
                Kernel::Conv(ConFesKernel {
                    depthwise: Array2::from_shape_vec(k.depthwise.dim(), params[..split].to_vec())
                        .expect("shape"),
                    global: Array2::from_shape_vec(k.global.dim(), params[split..].to_vec())
                        .expect("shape"),
                    stride: k.stride,
                    n_snapshots: k.n_snapshots,
                })
            }
        }
    }

    /// Flat non-negative `K x J` weights.
    pub fn effective(&self) -> Array2<f64> {
        match self {
            Kernel::Flat(k) => k.effective(),
            Kernel::Conv(k) => expand_confes(k),
        }
    }

    fn raw_sq_sum(&self) -> f64 {
        self.params().iter().map(|v| v * v).sum()
    }
}

fn check_kernel_input(k: usize, j: usize, logits: &LogitTensor) -> Result<()> {
    if (logits.n_extractors(), logits.n_snapshots()) != (k, j) {
        return Err(Error::Shape(format!(
            "kernel expects (K, J) = ({k}, {j}), logits have ({}, {})",
            logits.n_extractors(),
            logits.n_snapshots()
        )));
    }
    Ok(())
}

/// Meta logits `N x C` from non-negative effective weights, used as given.
pub fn forward_effective(weights: &Array2<f64>, logits: &LogitTensor) -> Result<Array2<f64>> {
    let (k, j) = weights.dim();
    check_kernel_input(k, j, logits)?;
    let c = logits.n_classes();
    let mut out = Array2::zeros((logits.n_instances(), c));
    for n in 0..logits.n_instances() {
        let block = logits.instance(n);
        let mut row = out.row_mut(n);
        for ((ki, ji), &w) in weights.indexed_iter() {
            if w == 0.0 {
                continue;
            }
            let at = (ki * j + ji) * c;
            for (acc, &l) in row.iter_mut().zip(&block[at..at + c]) {
                *acc += w * l as f64;
            }
        }
    }
    Ok(out)
}

/// Meta logits of the flat kernel: `sum_{k,j} max(W[k][j], 0) * l[k][j][c]`.
pub fn fes_forward(kernel: &FesKernel, logits: &LogitTensor) -> Result<Array2<f64>> {
    forward_effective(&kernel.effective(), logits)
}

/// Meta logits of the two-level kernel, evaluated level by level.
pub fn confes_forward(kernel: &ConFesKernel, logits: &LogitTensor) -> Result<Array2<f64>> {
    check_kernel_input(kernel.n_extractors(), kernel.n_snapshots, logits)?;
    let c = logits.n_classes();
    let j = kernel.n_snapshots;
    let depthwise = kernel.depthwise.mapv(relu);
    let global = kernel.global.mapv(relu);
    let mut out = Array2::zeros((logits.n_instances(), c));
    let mut feature = vec![0.0; c];
    for n in 0..logits.n_instances() {
        let block = logits.instance(n);
        for ki in 0..kernel.n_extractors() {
            for m in 0..kernel.map_len() {
                feature.iter_mut().for_each(|f| *f = 0.0);
                for b in 0..kernel.conv_size() {
                    let at = (ki * j + kernel.stride * m + b) * c;
                    let d = depthwise[[ki, b]];
                    for (f, &l) in feature.iter_mut().zip(&block[at..at + c]) {
                        *f += d * l as f64;
                    }
                }
                let g = global[[ki, m]];
                for (acc, f) in out.row_mut(n).iter_mut().zip(&feature) {
                    *acc += g * f;
                }
            }
        }
    }
    Ok(out)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Summed negative log-likelihood of `labels` under `softmax(meta_logits)`.
pub fn ce_loss(meta_logits: &Array2<f64>, labels: &[u32]) -> f64 {
    meta_logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let row = row.to_vec();
            log_sum_exp(&row) - row[y as usize]
        })
        .sum()
}

/// `strength * sum(raw^2)` over every level of the kernel.
pub fn ridge_penalty(kernel: &Kernel, strength: f64) -> f64 {
    strength * kernel.raw_sq_sum()
}

#[inline]
fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt() - eps
}

#[inline]
fn smooth_abs_grad(x: f64, eps: f64) -> f64 {
    x / (x * x + eps * eps).sqrt()
}

fn fused_lasso_effective(w: &Array2<f64>, lambda1: f64, lambda2: f64, eps: f64) -> f64 {
    let sparsity: f64 = w.iter().map(|&v| smooth_abs(v, eps)).sum();
    let smoothness: f64 = w
        .outer_iter()
        .map(|row| {
            row.as_slice()
                .expect("row-major")
                .windows(2)
                .map(|p| smooth_abs(p[0] - p[1], eps))
                .sum::<f64>()
        })
        .sum();
    lambda1 * sparsity + lambda2 * smoothness
}

/// Depthwise fused lasso on the effective weights, with `|x|` smoothed as
/// `sqrt(x^2 + eps^2) - eps`. Differences run along the snapshot axis of each
/// extractor row.
pub fn fused_lasso_penalty(kernel: &FesKernel, lambda1: f64, lambda2: f64, eps: f64) -> f64 {
    fused_lasso_effective(&kernel.effective(), lambda1, lambda2, eps)
}

fn fused_lasso_grad(w: &Array2<f64>, lambda1: f64, lambda2: f64, eps: f64, grad: &mut Array2<f64>) {
    if lambda1 != 0.0 {
        for (g, &v) in grad.iter_mut().zip(w.iter()) {
            *g += lambda1 * smooth_abs_grad(v, eps);
        }
    }
    if lambda2 != 0.0 {
        let j = w.ncols();
        for ki in 0..w.nrows() {
            for ji in 0..j.saturating_sub(1) {
                let d = lambda2 * smooth_abs_grad(w[[ki, ji]] - w[[ki, ji + 1]], eps);
                grad[[ki, ji]] += d;
                grad[[ki, ji + 1]] -= d;
            }
        }
    }
}

/// Objective weights for one stacker fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub method: Method,
    pub ridge_strength: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub abs_smoothing_eps: f64,
}

pub const DEFAULT_RIDGE: f64 = 1e-2;
pub const DEFAULT_ABS_EPS: f64 = 1e-8;

impl RegConfig {
    pub fn fes(ridge_strength: f64) -> Self {
        Self {
            method: Method::Fes,
            ridge_strength,
            lambda1: 0.0,
            lambda2: 0.0,
            abs_smoothing_eps: DEFAULT_ABS_EPS,
        }
    }

    pub fn confes(ridge_strength: f64) -> Self {
        Self {
            method: Method::ConFes,
            ..Self::fes(ridge_strength)
        }
    }

    pub fn refes(lambda1: f64, lambda2: f64) -> Self {
        Self {
            method: Method::ReFes,
            ridge_strength: 0.0,
            lambda1,
            lambda2,
            abs_smoothing_eps: DEFAULT_ABS_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let strengths = [self.ridge_strength, self.lambda1, self.lambda2];
        if strengths.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(format!(
                "regularisation strengths must be finite and >= 0, got {strengths:?}"
            )));
        }
        if !(self.abs_smoothing_eps > 0.0 && self.abs_smoothing_eps.is_finite()) {
            return Err(Error::Config("abs smoothing eps must be > 0".into()));
        }
        Ok(())
    }

    fn check_kernel(&self, kernel: &Kernel) -> Result<()> {
        match (self.method, kernel) {
            (Method::Fes | Method::ReFes, Kernel::Flat(_)) | (Method::ConFes, Kernel::Conv(_)) => {
                Ok(())
            }
            (m, _) => Err(Error::Config(format!(
                "method {m} does not use a {} kernel",
                if kernel.levels() == 1 { "flat" } else { "two-level" }
            ))),
        }
    }
}

/// Training logits flattened for repeated objective evaluations: one row of
/// `K * J` features per `(instance, class)` pair, widened to f64.
#[derive(Clone, Debug)]
pub struct StackingData {
    n: usize,
    c: usize,
    k: usize,
    j: usize,
    x: Vec<f64>,
    labels: Vec<u32>,
}

impl StackingData {
    pub fn new(logits: &LogitTensor, labels: &[u32]) -> Result<Self> {
        let [n, k, j, c] = logits.dims();
        if labels.len() != n {
            return Err(Error::DimMismatch {
                what: "stacking labels".into(),
                expected: n,
                found: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::LabelOutOfRange {
                what: "stacking labels".into(),
                label,
                classes: c,
            });
        }
        let kj = k * j;
        let mut x = vec![0.0; n * c * kj];
        for ni in 0..n {
            let block = logits.instance(ni);
            for f in 0..kj {
                for ci in 0..c {
                    x[(ni * c + ci) * kj + f] = block[f * c + ci] as f64;
                }
            }
        }
        Ok(Self {
            n,
            c,
            k,
            j,
            x,
            labels: labels.to_vec(),
        })
    }

    pub fn n_instances(&self) -> usize {
        self.n
    }

    pub fn n_classes(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.k, self.j)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Cross-entropy of the effective weights and its gradient with respect
    /// to them.
    pub fn data_loss_grad(&self, weights: &[f64]) -> (f64, Vec<f64>) {
        let kj = self.k * self.j;
        debug_assert_eq!(weights.len(), kj);
        let mut grad = vec![0.0; kj];
        let mut z = vec![0.0; self.c];
        let mut loss = 0.0;
        for ni in 0..self.n {
            let rows = &self.x[ni * self.c * kj..(ni + 1) * self.c * kj];
            for (zc, row) in z.iter_mut().zip(rows.chunks_exact(kj)) {
                *zc = dot(row, weights);
            }
            let lse = log_sum_exp(&z);
            let y = self.labels[ni] as usize;
            loss += lse - z[y];
            for (ci, row) in rows.chunks_exact(kj).enumerate() {
                let coeff = (z[ci] - lse).exp() - if ci == y { 1.0 } else { 0.0 };
                if coeff != 0.0 {
                    for (g, &v) in grad.iter_mut().zip(row) {
                        *g += coeff * v;
                    }
                }
            }
        }
        (loss, grad)
    }

    /// Like [`Self::data_loss_grad`] but the gradient is only filled in where
    /// the weight is non-zero. Sparse kernels skip the zero columns entirely.
    fn data_loss_grad_active(&self, weights: &[f64]) -> (f64, Vec<f64>) {
        let kj = self.k * self.j;
        let active: Vec<usize> = (0..kj).filter(|&f| weights[f] != 0.0).collect();
        if 4 * active.len() > kj {
            let (loss, mut grad) = self.data_loss_grad(weights);
            for (g, &w) in grad.iter_mut().zip(weights) {
                if w == 0.0 {
                    *g = 0.0;
                }
            }
            return (loss, grad);
        }
        let mut grad = vec![0.0; kj];
        let mut z = vec![0.0; self.c];
        let mut loss = 0.0;
        for ni in 0..self.n {
            let rows = &self.x[ni * self.c * kj..(ni + 1) * self.c * kj];
            for (zc, row) in z.iter_mut().zip(rows.chunks_exact(kj)) {
                *zc = active.iter().map(|&f| row[f] * weights[f]).sum();
            }
            let lse = log_sum_exp(&z);
            let y = self.labels[ni] as usize;
            loss += lse - z[y];
            for (ci, row) in rows.chunks_exact(kj).enumerate() {
                let coeff = (z[ci] - lse).exp() - if ci == y { 1.0 } else { 0.0 };
                for &f in &active {
                    grad[f] += coeff * row[f];
                }
            }
        }
        (loss, grad)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Eight partial sums keep the loop vectorisable with a fixed summation order.
    let mut acc = [0.0; 8];
    let (ac, at) = a.split_at(a.len() / 8 * 8);
    let (bc, bt) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = at.iter().zip(bt).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Total objective and its gradient with respect to the raw parameters, in
/// [`Kernel::params`] order.
///
/// The loss is the summed cross-entropy of the effective weights plus
/// `ridge * sum(raw^2)` plus the smoothed fused lasso on the effective flat
/// weights. Clipped parameters (`raw <= 0`) receive no data gradient.
pub fn loss_and_grad(kernel: &Kernel, data: &StackingData, config: &RegConfig) -> Result<(f64, Vec<f64>)> {
    config.check_kernel(kernel)?;
    let (k, j) = kernel.input_shape();
    if data.shape() != (k, j) {
        return Err(Error::Shape(format!(
            "kernel expects (K, J) = ({k}, {j}), data has {:?}",
            data.shape()
        )));
    }
    let effective = kernel.effective();
    let (mut loss, grad_eff) = data.data_loss_grad_active(effective.as_slice().expect("standard layout"));
    let mut grad_eff = Array2::from_shape_vec((k, j), grad_eff).expect("shape");

    if config.lambda1 != 0.0 || config.lambda2 != 0.0 {
        let eps = config.abs_smoothing_eps;
        loss += fused_lasso_effective(&effective, config.lambda1, config.lambda2, eps);
        fused_lasso_grad(&effective, config.lambda1, config.lambda2, eps, &mut grad_eff);
    }

    let mut grad = match kernel {
        Kernel::Flat(fk) => fk
            .raw
            .iter()
            .zip(grad_eff.iter())
            .map(|(&r, &g)| if r > 0.0 { g } else { 0.0 })
            .collect::<Vec<_>>(),
        Kernel::Conv(ck) => {
            let mut g_depth = Array2::<f64>::zeros(ck.depthwise.dim());
            let mut g_global = Array2::<f64>::zeros(ck.global.dim());
            for ki in 0..k {
                for m in 0..ck.map_len() {
                    let gv = ck.global[[ki, m]];
                    for b in 0..ck.conv_size() {
                        let dv = ck.depthwise[[ki, b]];
                        let upstream = grad_eff[[ki, ck.stride * m + b]];
                        if gv > 0.0 && dv > 0.0 {
                            g_depth[[ki, b]] += gv * upstream;
                            g_global[[ki, m]] += dv * upstream;
                        }
                    }
                }
            }
            g_depth.iter().chain(g_global.iter()).copied().collect()
        }
    };

    if config.ridge_strength != 0.0 {
        let params = kernel.params();
        loss += config.ridge_strength * params.iter().map(|v| v * v).sum::<f64>();
        for (g, p) in grad.iter_mut().zip(&params) {
            *g += 2.0 * config.ridge_strength * p;
        }
    }
    Ok((loss, grad))
}

/// Row-wise softmax.
pub fn softmax_rows(meta_logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = meta_logits.clone();
    for mut row in probs.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let total = row.sum();
        row.mapv_inplace(|p| p / total);
    }
    probs
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels and class probabilities for every query instance.
pub fn predict(kernel: &Kernel, query: &LogitTensor) -> Result<(Vec<u32>, Array2<f64>)> {
    let meta = match kernel {
        Kernel::Flat(k) => fes_forward(k, query)?,
        Kernel::Conv(k) => confes_forward(k, query)?,
    };
    let probs = softmax_rows(&meta);
    let labels = meta
        .outer_iter()
        .map(|row| argmax(&row.to_vec()) as u32)
        .collect();
    Ok((labels, probs))
}

/// Fraction of effective weights that are exactly zero.
pub fn omission_rate(effective: &Array2<f64>) -> f64 {
    if effective.is_empty() {
        return 0.0;
    }
    effective.iter().filter(|&&w| w == 0.0).count() as f64 / effective.len() as f64
}

/// One CSV row per extractor, one column per snapshot.
pub fn write_kernel_csv<W: Write>(weights: &Array2<f64>, out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in weights.outer_iter() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_instance(values: &[f32], k: usize, j: usize) -> LogitTensor {
        let c = values.len() / (k * j);
        LogitTensor::new(1, k, j, c, values.to_vec()).unwrap()
    }

    #[test]
    fn identity_weight_passes_logits_through() {
        let out = fes_forward(&FesKernel::new(array![[1.0]]), &one_instance(&[2.0, -1.0], 1, 1)).unwrap();
        assert_eq!(out, array![[2.0, -1.0]]);
    }

    #[test]
    fn negative_weight_is_clipped() {
        let out = fes_forward(&FesKernel::new(array![[-3.0]]), &one_instance(&[2.0, -1.0], 1, 1)).unwrap();
        assert_eq!(out, array![[0.0, 0.0]]);
    }

    #[test]
    fn two_extractors_average() {
        let logits = one_instance(&[2.0, 0.0, 0.0, 2.0], 2, 1);
        let out = fes_forward(&FesKernel::new(array![[0.5], [0.5]]), &logits).unwrap();
        assert_eq!(out, array![[1.0, 1.0]]);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let logits = one_instance(&[1.0, 2.0], 1, 1);
        assert!(matches!(
            fes_forward(&FesKernel::constant(2, 1, 1.0), &logits),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn degenerate_hierarchy_matches_flat_all_ones() {
        let data: Vec<f32> = (0..3 * 4 * 2).map(|v| (v as f32 * 0.37).sin()).collect();
        let logits = LogitTensor::new(1, 3, 4, 2, data).unwrap();
        let conv = ConFesKernel::constant(3, 4, 4, 1, 1.0).unwrap();
        assert_eq!(conv.map_len(), 1);
        let flat = fes_forward(&FesKernel::constant(3, 4, 1.0), &logits).unwrap();
        let hier = confes_forward(&conv, &logits).unwrap();
        for (a, b) in flat.iter().zip(hier.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_global_kernel_gives_zero_logits() {
        let logits = LogitTensor::new(2, 1, 5, 3, vec![1.5; 30]).unwrap();
        let mut conv = ConFesKernel::constant(1, 5, 3, 2, 1.0).unwrap();
        conv.global.fill(0.0);
        assert!(confes_forward(&conv, &logits).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_conv_expands_to_global_kernel() {
        let conv = ConFesKernel::new(array![[1.0]], array![[1.0, 1.0, 1.0, 1.0]], 1, 4).unwrap();
        assert_eq!(expand_confes(&conv), Array2::from_elem((1, 4), 1.0));
    }

    #[test]
    fn overlapping_windows_sum_at_shared_columns() {
        // J_b = 9, T = 4: column j is covered by every window m with 4m <= j < 4m + 9.
        let conv = ConFesKernel::constant(1, 41, 9, 4, 1.0).unwrap();
        assert_eq!(conv.map_len(), 9);
        let w = expand_confes(&conv);
        for j in 0..41 {
            let windows = (0..9).filter(|m| 4 * m <= j && j < 4 * m + 9).count();
            assert_eq!(w[[0, j]], windows as f64, "column {j}");
        }
        assert_eq!(w[[0, 0]], 1.0);
        assert_eq!(w[[0, 8]], 3.0);
        assert_eq!(w[[0, 9]], 2.0);
    }

    #[test]
    fn confes_shape_errors() {
        assert!(feature_map_len(41, 9, 5).is_err());
        assert!(feature_map_len(7, 9, 1).is_err());
        assert!(feature_map_len(7, 2, 3).is_err());
        assert!(feature_map_len(7, 3, 0).is_err());
        assert_eq!(feature_map_len(7, 3, 2).unwrap(), 3);
        assert!(ConFesKernel::new(Array2::zeros((2, 3)), Array2::zeros((2, 2)), 2, 7).is_err());
    }

    #[test]
    fn ce_loss_cases() {
        assert!((ce_loss(&array![[0.0, 0.0]], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        let big = ce_loss(&array![[1000.0, 0.0]], &[0]);
        assert!(big.is_finite() && big.abs() < 1e-12);
        let two = ce_loss(&array![[1.0, 0.0], [1.0, 0.0]], &[0, 1]);
        let expected = (1.0 + (-1.0f64).exp()).ln() + (1.0 + 1.0f64.exp()).ln();
        assert!((two - expected).abs() < 1e-12);
    }

    #[test]
    fn ridge_cases() {
        assert_eq!(ridge_penalty(&Kernel::Flat(FesKernel::constant(2, 3, 0.0)), 1.0), 0.0);
        let k = Kernel::Flat(FesKernel::new(array![[1.0, 1.0]]));
        assert!((ridge_penalty(&k, 1e-2) - 0.02).abs() < 1e-15);
        let conv = ConFesKernel::new(array![[1.0, -2.0]], array![[3.0, 0.5]], 1, 3).unwrap();
        let per_level = 1.0 + 4.0 + 9.0 + 0.25;
        assert!((ridge_penalty(&Kernel::Conv(conv), 0.1) - 0.1 * per_level).abs() < 1e-12);
    }

    #[test]
    fn fused_lasso_cases() {
        assert_eq!(fused_lasso_penalty(&FesKernel::constant(2, 4, 0.0), 1.0, 1.0, 1e-8), 0.0);
        let flat_row = FesKernel::constant(1, 5, 0.7);
        assert!(fused_lasso_penalty(&flat_row, 0.0, 1.0, 1e-8).abs() < 1e-12);
        let pen = fused_lasso_penalty(&FesKernel::new(array![[1.0, 0.0]]), 1.0, 1.0, 1e-12);
        assert!((pen - 2.0).abs() < 1e-9);
        // Penalty is computed on effective weights.
        let neg = fused_lasso_penalty(&FesKernel::new(array![[-5.0, -1.0]]), 1.0, 1.0, 1e-12);
        assert!(neg.abs() < 1e-9);
    }

    #[test]
    fn data_gradient_vanishes_in_dead_zone() {
        let logits = LogitTensor::new(3, 2, 2, 3, (0..36).map(|v| (v as f32).cos()).collect()).unwrap();
        let data = StackingData::new(&logits, &[0, 1, 2]).unwrap();
        let kernel = Kernel::Flat(FesKernel::constant(2, 2, -0.5));
        let (_, grad) = loss_and_grad(&kernel, &data, &RegConfig::fes(0.0)).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unregularised_loss_is_plain_cross_entropy() {
        let logits = LogitTensor::new(3, 2, 2, 3, (0..36).map(|v| (v as f32 * 0.3).sin()).collect()).unwrap();
        let labels = [2, 0, 1];
        let raw = array![[0.3, -0.2], [1.1, 0.05]];
        let data = StackingData::new(&logits, &labels).unwrap();
        let kernel = FesKernel::new(raw);
        let (loss, _) = loss_and_grad(&Kernel::Flat(kernel.clone()), &data, &RegConfig::refes(0.0, 0.0)).unwrap();
        let direct = ce_loss(&fes_forward(&kernel, &logits).unwrap(), &labels);
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn method_kernel_mismatch_is_config_error() {
        let logits = LogitTensor::zeros(1, 1, 3, 2).unwrap();
        let data = StackingData::new(&logits, &[0]).unwrap();
        let kernel = Kernel::Flat(FesKernel::constant(1, 3, 1.0));
        assert!(matches!(
            loss_and_grad(&kernel, &data, &RegConfig::confes(0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_tie_breaks_low_and_normalises() {
        let logits = LogitTensor::new(2, 1, 1, 3, vec![0.2, 0.9, -1.0, 4.0, 4.0, 4.0]).unwrap();
        let (labels, probs) = predict(&Kernel::Flat(FesKernel::constant(1, 1, 1.0)), &logits).unwrap();
        assert_eq!(labels, vec![1, 0]);
        let (zero_labels, zero_probs) =
            predict(&Kernel::Flat(FesKernel::constant(1, 1, 0.0)), &logits).unwrap();
        assert_eq!(zero_labels, vec![0, 0]);
        for row in zero_probs.outer_iter() {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        for row in probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn omission_rate_counts_zeros() {
        assert_eq!(omission_rate(&array![[1.0, 2.0], [0.5, 0.1]]), 0.0);
        assert_eq!(omission_rate(&FesKernel::constant(2, 3, -1.0).effective()), 1.0);
        assert_eq!(omission_rate(&array![[1.0, 0.0], [0.5, 0.1]]), 0.25);
    }

    #[test]
    fn kernel_csv_has_one_row_per_extractor() {
        let mut buf = Vec::new();
        write_kernel_csv(&array![[1.0, 0.5], [0.0, 2.25]], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,0.5\n0,2.25\n");
    }

    #[test]
    fn params_round_trip_through_kernel() {
        let conv = Kernel::Conv(ConFesKernel::constant(2, 7, 3, 2, 0.1).unwrap());
        let params: Vec<f64> = (0..conv.param_count()).map(|i| i as f64).collect();
        assert_eq!(conv.with_params(&params).params(), params);
        assert_eq!(conv.param_count(), 2 * (3 + 3));
    }
}
