//! Differentiable models with per-sample gradients and L2 clipping.
//!
//! Three model kinds share one flat parameter vector format:
//!
//! | kind       | layout                                  | labels        |
//! |------------|-----------------------------------------|---------------|
//! | `Svm`      | `w[d]`                                  | `+1` / `-1`   |
//! | `Logistic` | `W[c][d]`, `b[c]`                       | `0..c`        |
//! | `Mlp`      | `W1[h][d]`, `b1[h]`, `W2[c][h]`, `b2[c]` | `0..c`        |
//!
//! [`per_sample_gradient`] is a plain scalar implementation used as the
//! reference; [`local_update`] and [`per_sample_gradient_norms`] use a batched
//! path built on `dgemm` that never materialises the per-sample gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Svm,
    Logistic,
    Mlp,
}

/// Hinge term of the SVM objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HingeForm {
    /// `max(y - w.x, 0)`.
    #[default]
    Verbatim,
    /// `max(1 - y w.x, 0)`.
    Textbook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub hinge: HingeForm,
}

impl ModelSpec {
    pub fn svm(input_dim: usize, kappa: f64, hinge: HingeForm) -> Self {
        Self {
            kind: ModelKind::Svm,
            input_dim,
            hidden_dim: 0,
            num_classes: 2,
            kappa,
            hinge,
        }
    }

    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            num_classes,
            kappa: 0.0,
            hinge: HingeForm::default(),
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
            kappa: 0.0,
            hinge: HingeForm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::domain("input_dim must be positive"));
        }
        match self.kind {
            ModelKind::Svm => {
                if !(self.kappa > 0.0 && self.kappa.is_finite()) {
                    return Err(Error::domain("svm needs kappa > 0"));
                }
            }
            ModelKind::Logistic => {
                if self.num_classes < 2 {
                    return Err(Error::domain("logistic needs at least 2 classes"));
                }
            }
            ModelKind::Mlp => {
                if self.num_classes < 2 || self.hidden_dim == 0 {
                    return Err(Error::domain("mlp needs hidden_dim >= 1 and at least 2 classes"));
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::Svm => d,
            ModelKind::Logistic => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    fn check_label(&self, label: i32) -> Result<()> {
        let ok = match self.kind {
            ModelKind::Svm => label == 1 || label == -1,
            _ => label >= 0 && (label as usize) < self.num_classes,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("label {label} invalid for {:?}", self.kind)))
        }
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.num_params()],
        }
    }

    pub fn from_vec(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.num_params() {
            return Err(Error::ShapeMismatch {
                expected: spec.num_params(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("parameters must be finite"));
        }
        Ok(Self { values })
    }

    /// Zero for the convex models; uniform in `+-1/sqrt(fan_in)` for the MLP.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        if spec.kind == ModelKind::Mlp {
            let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
            let a = 1.0 / (d as f64).sqrt();
            let b = 1.0 / (h as f64).sqrt();
            let (first, second) = p.values.split_at_mut(h * d + h);
            for v in first {
                *v = rng.random_range(-a..=a);
            }
            debug_assert_eq!(second.len(), c * h + c);
            for v in second {
                *v = rng.random_range(-b..=b);
            }
        }
        p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.values.len() != spec.num_params() {
            return Err(Error::ShapeMismatch {
                expected: spec.num_params(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: i32,
}

impl Sample {
    pub fn as_ref(&self) -> SampleRef<'_> {
        SampleRef {
            features: &self.features,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub features: &'a [f64],
    pub label: i32,
}

/// Row-major view over `n` samples of dimension `dim`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    features: &'a [f64],
    labels: &'a [i32],
    dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [i32], dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::ShapeMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        Ok(Self { features, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &'a [f64] {
        self.features
    }

    pub fn labels(&self) -> &'a [i32] {
        self.labels
    }

    pub fn row(&self, i: usize) -> SampleRef<'a> {
        SampleRef {
            features: &self.features[i * self.dim..(i + 1) * self.dim],
            label: self.labels[i],
        }
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.dim != spec.input_dim {
            return Err(Error::ShapeMismatch {
                expected: spec.input_dim,
                got: self.dim,
            });
        }
        self.labels.iter().try_for_each(|&l| spec.check_label(l))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index reachable through the given
    // strides, since all callers pass dense row- or column-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Replaces each row of logits by its softmax and returns the per-row
/// cross-entropy against `labels`.
fn softmax_rows(logits: &mut [f64], labels: &[i32], c: usize) -> Vec<f64> {
    logits
        .chunks_mut(c)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted_y = row[y as usize] - m;
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            s.ln() - shifted_y
        })
        .collect()
}

struct Forward {
    /// Hidden pre-activations (MLP only), `n x h`.
    pre: Vec<f64>,
    /// Hidden activations (MLP only), `n x h`.
    act: Vec<f64>,
    /// Class probabilities, `n x c`.
    probs: Vec<f64>,
    /// Per-sample cross-entropy.
    losses: Vec<f64>,
}

fn forward(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>) -> Forward {
    let (n, d, h, c) = (batch.len(), spec.input_dim, spec.hidden_dim, spec.num_classes);
    let x = batch.features;
    match spec.kind {
        ModelKind::Logistic => {
            let (wm, b) = w.split_at(c * d);
            let mut logits: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
            gemm(n, d, c, 1.0, x, (d as isize, 1), wm, (1, d as isize), 1.0, &mut logits);
            let losses = softmax_rows(&mut logits, batch.labels, c);
            Forward {
                pre: Vec::new(),
                act: Vec::new(),
                probs: logits,
                losses,
            }
        }
        ModelKind::Mlp => {
            let (w1, rest) = w.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut pre: Vec<f64> = (0..n).flat_map(|_| b1.iter().copied()).collect();
            gemm(n, d, h, 1.0, x, (d as isize, 1), w1, (1, d as isize), 1.0, &mut pre);
            let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
            let mut logits: Vec<f64> = (0..n).flat_map(|_| b2.iter().copied()).collect();
            gemm(
                n,
                h,
                c,
                1.0,
                &act,
                (h as isize, 1),
                w2,
                (1, h as isize),
                1.0,
                &mut logits,
            );
            let losses = softmax_rows(&mut logits, batch.labels, c);
            Forward {
                pre,
                act,
                probs: logits,
                losses,
            }
        }
        ModelKind::Svm => unreachable!("svm has no softmax forward pass"),
    }
}

fn hinge_margin(spec: &ModelSpec, w: &[f64], s: SampleRef<'_>) -> (f64, f64) {
    let y = s.label as f64;
    let wx = dot(w, s.features);
    match spec.hinge {
        HingeForm::Verbatim => (y - wx, 1.0),
        HingeForm::Textbook => (1.0 - y * wx, y),
    }
}

/// Mean per-sample loss over `batch`, including the SVM regulariser.
pub fn loss(spec: &ModelSpec, params: &ModelParams, batch: &Batch<'_>) -> Result<f64> {
    params.check(spec)?;
    batch.check(spec)?;
    if batch.is_empty() {
        return Err(Error::domain("loss of an empty batch"));
    }
    let w = params.as_slice();
    let n = batch.len() as f64;
    Ok(match spec.kind {
        ModelKind::Svm => {
            let hinge: f64 = (0..batch.len())
                .map(|i| hinge_margin(spec, w, batch.row(i)).0.max(0.0))
                .sum();
            0.5 * spec.kappa * norm_sq(w) + hinge / n
        }
        _ => forward(spec, w, batch).losses.iter().sum::<f64>() / n,
    })
}

/// Fraction of correctly classified samples (sign for SVM, argmax otherwise).
pub fn accuracy(spec: &ModelSpec, params: &ModelParams, batch: &Batch<'_>) -> Result<f64> {
    params.check(spec)?;
    batch.check(spec)?;
    if batch.is_empty() {
        return Err(Error::domain("accuracy of an empty batch"));
    }
    let w = params.as_slice();
    let correct = match spec.kind {
        ModelKind::Svm => (0..batch.len())
            .filter(|&i| {
                let s = batch.row(i);
                let wx = dot(w, s.features);
                (wx >= 0.0) == (s.label > 0)
            })
            .count(),
        _ => {
            let c = spec.num_classes;
            let f = forward(spec, w, batch);
            f.probs
                .chunks(c)
                .zip(batch.labels)
                .filter(|(row, &y)| {
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(k, _)| k)
                        .unwrap_or(0);
                    best == y as usize
                })
                .count()
        }
    };
    Ok(correct as f64 / batch.len() as f64)
}

/// Gradient of the loss of a single sample (scalar reference implementation).
pub fn per_sample_gradient(spec: &ModelSpec, params: &ModelParams, sample: SampleRef<'_>) -> Result<Vec<f64>> {
    params.check(spec)?;
    if sample.features.len() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            expected: spec.input_dim,
            got: sample.features.len(),
        });
    }
    spec.check_label(sample.label)?;
    let w = params.as_slice();
    let x = sample.features;
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let mut g = vec![0.0; w.len()];
    match spec.kind {
        ModelKind::Svm => {
            let (m, a) = hinge_margin(spec, w, sample);
            for j in 0..d {
                g[j] = spec.kappa * w[j];
                if m > 0.0 {
                    g[j] -= a * x[j];
                }
            }
        }
        ModelKind::Logistic => {
            let mut z: Vec<f64> = (0..c)
                .map(|k| w[c * d + k] + (0..d).map(|j| w[k * d + j] * x[j]).sum::<f64>())
                .collect();
            let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
            for v in z.iter_mut() {
                *v = (*v - mx).exp() / s;
            }
            z[sample.label as usize] -= 1.0;
            for k in 0..c {
                for j in 0..d {
                    g[k * d + j] = z[k] * x[j];
                }
                g[c * d + k] = z[k];
            }
        }
        ModelKind::Mlp => {
            let (o_b1, o_w2, o_b2) = (h * d, h * d + h, h * d + h + c * h);
            let pre: Vec<f64> = (0..h)
                .map(|i| w[o_b1 + i] + (0..d).map(|j| w[i * d + j] * x[j]).sum::<f64>())
                .collect();
            let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let mut p: Vec<f64> = (0..c)
                .map(|k| w[o_b2 + k] + (0..h).map(|i| w[o_w2 + k * h + i] * act[i]).sum::<f64>())
                .collect();
            let mx = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = p.iter().map(|v| (v - mx).exp()).sum();
            for v in p.iter_mut() {
                *v = (*v - mx).exp() / s;
            }
            p[sample.label as usize] -= 1.0;
            for k in 0..c {
                for i in 0..h {
                    g[o_w2 + k * h + i] = p[k] * act[i];
                }
                g[o_b2 + k] = p[k];
            }
            for i in 0..h {
                if pre[i] <= 0.0 {
                    continue;
                }
                let back: f64 = (0..c).map(|k| p[k] * w[o_w2 + k * h + i]).sum();
                for j in 0..d {
                    g[i * d + j] = back * x[j];
                }
                g[o_b1 + i] = back;
            }
        }
    }
    Ok(g)
}

/// Scales `g` by `1 / max(1, |g| / clip)`.
pub fn clip_gradient(g: &mut [f64], clip: f64) {
    let n = norm_sq(g).sqrt();
    if n > clip {
        let s = clip / n;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
}

fn clip_factor(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

/// Batched clipped-mean gradient. Returns the mean of the clipped per-sample
/// gradients and the unclipped per-sample norms.
fn clipped_mean_gradient(spec: &ModelSpec, w: &[f64], batch: &Batch<'_>, clip: Option<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d, h, c) = (batch.len(), spec.input_dim, spec.hidden_dim, spec.num_classes);
    let x = batch.features;
    let inv_n = 1.0 / n as f64;
    let mut g = vec![0.0; w.len()];
    let x_sq: Vec<f64> = x.chunks(d).map(norm_sq).collect();
    match spec.kind {
        ModelKind::Svm => {
            // g_m = kappa w - a_m x_m for active samples.
            let kw_sq = spec.kappa * spec.kappa * norm_sq(w);
            let mut reg_weight = 0.0;
            let norms: Vec<f64> = (0..n)
                .map(|i| {
                    let s = batch.row(i);
                    let (m, a) = hinge_margin(spec, w, s);
                    let a = if m > 0.0 { a } else { 0.0 };
                    let wx = dot(w, s.features);
                    let nrm = (kw_sq - 2.0 * spec.kappa * a * wx + a * a * x_sq[i]).max(0.0).sqrt();
                    let f = clip_factor(nrm, clip);
                    reg_weight += f;
                    if a != 0.0 {
                        let coef = -f * a * inv_n;
                        for (gj, xj) in g.iter_mut().zip(s.features) {
                            *gj += coef * xj;
                        }
                    }
                    nrm
                })
                .collect();
            let k = spec.kappa * reg_weight * inv_n;
            for (gj, wj) in g.iter_mut().zip(w) {
                *gj += k * wj;
            }
            (g, norms)
        }
        ModelKind::Logistic => {
            let mut f = forward(spec, w, batch);
            let delta = &mut f.probs;
            let mut norms = Vec::with_capacity(n);
            for (i, row) in delta.chunks_mut(c).enumerate() {
                row[batch.labels[i] as usize] -= 1.0;
                let nrm = (norm_sq(row) * (x_sq[i] + 1.0)).sqrt();
                let s = clip_factor(nrm, clip) * inv_n;
                row.iter_mut().for_each(|v| *v *= s);
                norms.push(nrm);
            }
            let (gw, gb) = g.split_at_mut(c * d);
            gemm(c, n, d, 1.0, delta, (1, c as isize), x, (d as isize, 1), 0.0, gw);
            for row in delta.chunks(c) {
                gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
            }
            (g, norms)
        }
        ModelKind::Mlp => {
            let w2 = &w[h * d + h..h * d + h + c * h];
            let mut f = forward(spec, w, batch);
            let d2 = &mut f.probs;
            for (i, row) in d2.chunks_mut(c).enumerate() {
                row[batch.labels[i] as usize] -= 1.0;
            }
            let mut d1 = vec![0.0; n * h];
            gemm(n, c, h, 1.0, d2, (c as isize, 1), w2, (h as isize, 1), 0.0, &mut d1);
            for (v, &z) in d1.iter_mut().zip(&f.pre) {
                if z <= 0.0 {
                    *v = 0.0;
                }
            }
            let mut norms = Vec::with_capacity(n);
            for i in 0..n {
                let r1 = &mut d1[i * h..(i + 1) * h];
                let r2 = &mut d2[i * c..(i + 1) * c];
                let a_sq = norm_sq(&f.act[i * h..(i + 1) * h]);
                let nrm = (norm_sq(r1) * (x_sq[i] + 1.0) + norm_sq(r2) * (a_sq + 1.0)).sqrt();
                let s = clip_factor(nrm, clip) * inv_n;
                r1.iter_mut().for_each(|v| *v *= s);
                r2.iter_mut().for_each(|v| *v *= s);
                norms.push(nrm);
            }
            let (gw1, rest) = g.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            gemm(h, n, d, 1.0, &d1, (1, h as isize), x, (d as isize, 1), 0.0, gw1);
            gemm(c, n, h, 1.0, d2, (1, c as isize), &f.act, (h as isize, 1), 0.0, gw2);
            for row in d1.chunks(h) {
                gb1.iter_mut().zip(row).for_each(|(b, v)| *b += v);
            }
            for row in d2.chunks(c) {
                gb2.iter_mut().zip(row).for_each(|(b, v)| *b += v);
            }
            (g, norms)
        }
    }
}

/// Unclipped L2 norm of every per-sample gradient in `batch`.
pub fn per_sample_gradient_norms(spec: &ModelSpec, params: &ModelParams, batch: &Batch<'_>) -> Result<Vec<f64>> {
    params.check(spec)?;
    batch.check(spec)?;
    Ok(clipped_mean_gradient(spec, params.as_slice(), batch, None).1)
}

/// One full-batch step `w - eta/|D| * sum_m clip(g_m, C)`.
pub fn local_update(
    spec: &ModelSpec,
    params: &ModelParams,
    shard: &Batch<'_>,
    eta: f64,
    clip: f64,
) -> Result<ModelParams> {
    params.check(spec)?;
    shard.check(spec)?;
    if shard.is_empty() {
        return Err(Error::domain("local update on an empty shard"));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::domain(format!("learning rate {eta} must be >= 0")));
    }
    if !(clip > 0.0) {
        return Err(Error::domain(format!("clipping threshold {clip} must be > 0")));
    }
    let w = params.as_slice();
    let (g, _) = clipped_mean_gradient(spec, w, shard, Some(clip));
    let values = w.iter().zip(&g).map(|(wi, gi)| wi - eta * gi).collect();
    Ok(ModelParams { values })
}

/// Largest eigenvalue of `A^T A / n` by power iteration, where the rows of
/// `A` are the samples, optionally with a constant 1 appended.
fn gram_top_eigenvalue(batch: &Batch<'_>, with_bias: bool) -> f64 {
    let d = batch.dim() + usize::from(with_bias);
    let n = batch.len() as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for i in 0..batch.len() {
            let x = batch.row(i).features;
            let mut proj = dot(&v[..x.len()], x);
            if with_bias {
                proj += v[d - 1];
            }
            for (nj, xj) in next.iter_mut().zip(x) {
                *nj += proj * xj;
            }
            if with_bias {
                next[d - 1] += proj;
            }
        }
        next.iter_mut().for_each(|e| *e /= n);
        let norm = norm_sq(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - lambda).abs() <= 1e-10 * norm;
        lambda = norm;
        v = next.into_iter().map(|e| e / norm).collect();
        if converged {
            break;
        }
    }
    lambda
}

/// Smoothness constant estimate for the convex models (`None` for the MLP).
///
/// SVM: `kappa + lambda_max(X^T X / n)`. Logistic: `lambda_max([X 1]^T [X 1] / n) / 2`.
pub fn smoothness_estimate(spec: &ModelSpec, batch: &Batch<'_>) -> Result<Option<f64>> {
    batch.check(spec)?;
    if batch.is_empty() {
        return Ok(None);
    }
    Ok(match spec.kind {
        ModelKind::Svm => Some(spec.kappa + gram_top_eigenvalue(batch, false)),
        ModelKind::Logistic => Some(0.5 * gram_top_eigenvalue(batch, true)),
        ModelKind::Mlp => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_instance(spec: &ModelSpec, n: usize, seed: u64) -> (ModelParams, Vec<f64>, Vec<i32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..spec.num_params())
            .map(|_| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let x: Vec<f64> = (0..n * spec.input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let y: Vec<i32> = (0..n)
            .map(|_| match spec.kind {
                ModelKind::Svm => {
                    if rng.random::<bool>() {
                        1
                    } else {
                        -1
                    }
                }
                _ => rng.random_range(0..spec.num_classes as i32),
            })
            .collect();
        (ModelParams::from_vec(spec, values).unwrap(), x, y)
    }

    fn all_specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::svm(6, 0.3, HingeForm::Verbatim),
            ModelSpec::svm(6, 0.3, HingeForm::Textbook),
            ModelSpec::logistic(5, 3),
            ModelSpec::mlp(5, 4, 3),
        ]
    }

    /// Scalar-loop loss of one sample, written independently of the batched path.
    fn naive_sample_loss(spec: &ModelSpec, w: &[f64], x: &[f64], y: i32) -> f64 {
        let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
        let ce = |z: Vec<f64>| {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y as usize]
        };
        match spec.kind {
            ModelKind::Svm => {
                let mut wx = 0.0;
                let mut ww = 0.0;
                for j in 0..d {
                    wx += w[j] * x[j];
                    ww += w[j] * w[j];
                }
                let m = match spec.hinge {
                    HingeForm::Verbatim => y as f64 - wx,
                    HingeForm::Textbook => 1.0 - y as f64 * wx,
                };
                0.5 * spec.kappa * ww + m.max(0.0)
            }
            ModelKind::Logistic => {
                let mut z = vec![0.0; c];
                for k in 0..c {
                    z[k] = w[c * d + k];
                    for j in 0..d {
                        z[k] += w[k * d + j] * x[j];
                    }
                }
                ce(z)
            }
            ModelKind::Mlp => {
                let mut a = vec![0.0; h];
                for i in 0..h {
                    let mut s = w[h * d + i];
                    for j in 0..d {
                        s += w[i * d + j] * x[j];
                    }
                    a[i] = s.max(0.0);
                }
                let o = h * d + h;
                let mut z = vec![0.0; c];
                for k in 0..c {
                    z[k] = w[o + c * h + k];
                    for i in 0..h {
                        z[k] += w[o + k * h + i] * a[i];
                    }
                }
                ce(z)
            }
        }
    }

    #[test]
    fn svm_loss_at_zero_weights() {
        let spec = ModelSpec::svm(3, 1.0, HingeForm::Verbatim);
        let x = [0.5, -1.0, 2.0, 1.0, 1.0, 1.0];
        let y = [1, 1];
        let b = Batch::new(&x, &y, 3).unwrap();
        assert_eq!(loss(&spec, &ModelParams::zeros(&spec), &b).unwrap(), 1.0);
    }

    #[test]
    fn uniform_logistic_loss_is_ln2() {
        let spec = ModelSpec::logistic(4, 2);
        let p = ModelParams::from_vec(&spec, vec![0.25; spec.num_params()]).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.5, 9.0];
        let y = [0, 1];
        let b = Batch::new(&x, &y, 4).unwrap();
        assert!((loss(&spec, &p, &b).unwrap() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_naive_reference() {
        for (s, spec) in all_specs().iter().enumerate() {
            let (p, x, y) = random_instance(spec, 7, 40 + s as u64);
            let b = Batch::new(&x, &y, spec.input_dim).unwrap();
            let naive: f64 = (0..7)
                .map(|i| naive_sample_loss(spec, p.as_slice(), b.row(i).features, y[i]))
                .sum::<f64>()
                / 7.0;
            let got = loss(spec, &p, &b).unwrap();
            assert!((got - naive).abs() < 1e-10, "{:?}: {got} vs {naive}", spec.kind);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for (s, spec) in all_specs().iter().enumerate() {
            let (p, x, y) = random_instance(spec, 1, 7 + s as u64);
            let g = per_sample_gradient(
                spec,
                &p,
                SampleRef {
                    features: &x,
                    label: y[0],
                },
            )
            .unwrap();
            for j in 0..spec.num_params() {
                let mut plus = p.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd =
                    (naive_sample_loss(spec, &plus, &x, y[0]) - naive_sample_loss(spec, &minus, &x, y[0])) / (2.0 * h);
                let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
                assert!(err < 1e-5, "{:?} coord {j}: fd {fd} vs {}", spec.kind, g[j]);
            }
        }
    }

    #[test]
    fn inactive_hinge_leaves_only_regulariser() {
        let spec = ModelSpec::svm(2, 0.5, HingeForm::Textbook);
        let p = ModelParams::from_vec(&spec, vec![2.0, 0.0]).unwrap();
        let g = per_sample_gradient(
            &spec,
            &p,
            SampleRef {
                features: &[1.0, 3.0],
                label: 1,
            },
        )
        .unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
        let spec = ModelSpec::svm(2, 0.5, HingeForm::Verbatim);
        let g = per_sample_gradient(
            &spec,
            &p,
            SampleRef {
                features: &[1.0, 3.0],
                label: 1,
            },
        )
        .unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_input_logistic_gradient_is_bias_only() {
        let spec = ModelSpec::logistic(3, 4);
        let (p, _, _) = random_instance(&spec, 1, 3);
        let g = per_sample_gradient(
            &spec,
            &p,
            SampleRef {
                features: &[0.0; 3],
                label: 2,
            },
        )
        .unwrap();
        assert!(g[..12].iter().all(|&v| v == 0.0));
        assert!(g[12..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![6.0, 8.0];
        clip_gradient(&mut g, 5.0);
        assert!((norm_sq(&g).sqrt() - 5.0).abs() < 1e-15);
        assert!((g[0] / g[1] - 0.75).abs() < 1e-15);
        let mut g = vec![0.0, 3.0];
        clip_gradient(&mut g, 5.0);
        assert_eq!(g, vec![0.0, 3.0]);
        let mut g = vec![0.0; 4];
        clip_gradient(&mut g, 1.0);
        assert_eq!(g, vec![0.0; 4]);
    }

    #[test]
    fn batched_update_matches_per_sample_reference() {
        for (s, spec) in all_specs().iter().enumerate() {
            let (p, x, y) = random_instance(spec, 9, 100 + s as u64);
            let b = Batch::new(&x, &y, spec.input_dim).unwrap();
            let (eta, clip) = (0.3, 0.8);
            let mut expected = p.as_slice().to_vec();
            let mut norms = Vec::new();
            for i in 0..b.len() {
                let mut g = per_sample_gradient(spec, &p, b.row(i)).unwrap();
                norms.push(norm_sq(&g).sqrt());
                clip_gradient(&mut g, clip);
                for (e, gj) in expected.iter_mut().zip(&g) {
                    *e -= eta * gj / 9.0;
                }
            }
            let got = local_update(spec, &p, &b, eta, clip).unwrap();
            for (a, e) in got.as_slice().iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12, "{:?}: {a} vs {e}", spec.kind);
            }
            let batched = per_sample_gradient_norms(spec, &p, &b).unwrap();
            for (a, e) in batched.iter().zip(&norms) {
                assert!((a - e).abs() < 1e-12 * e.max(1.0));
            }
        }
    }

    #[test]
    fn zero_step_and_unclipped_step() {
        let spec = ModelSpec::logistic(3, 2);
        let (p, x, y) = random_instance(&spec, 1, 5);
        let b = Batch::new(&x, &y, 3).unwrap();
        assert_eq!(local_update(&spec, &p, &b, 0.0, 1.0).unwrap(), p);
        let g = per_sample_gradient(&spec, &p, b.row(0)).unwrap();
        let got = local_update(&spec, &p, &b, 0.1, 1e12).unwrap();
        for ((a, w), gj) in got.as_slice().iter().zip(p.as_slice()).zip(&g) {
            assert!((a - (w - 0.1 * gj)).abs() < 1e-15);
        }
        let empty = Batch::new(&[], &[], 3).unwrap();
        assert!(local_update(&spec, &p, &empty, 0.1, 1.0).is_err());
    }

    #[test]
    fn shape_errors() {
        let spec = ModelSpec::mlp(4, 3, 2);
        assert!(ModelParams::from_vec(&spec, vec![0.0; 5]).is_err());
        let p = ModelParams::zeros(&spec);
        let x = [0.0; 6];
        let b = Batch::new(&x, &[0, 1], 3).unwrap();
        assert!(matches!(loss(&spec, &p, &b), Err(Error::ShapeMismatch { .. })));
        let b = Batch::new(&x[..4], &[5], 4).unwrap();
        assert!(loss(&spec, &p, &b).is_err());
        assert!(Batch::new(&x, &[0], 4).is_err());
    }

    #[test]
    fn noiseless_svm_descent_decreases_loss() {
        let spec = ModelSpec::svm(5, 0.05, HingeForm::Textbook);
        let (_, x, y) = random_instance(&spec, 60, 11);
        let b = Batch::new(&x, &y, 5).unwrap();
        let l = smoothness_estimate(&spec, &b).unwrap().unwrap();
        let mut p = ModelParams::zeros(&spec);
        let start = loss(&spec, &p, &b).unwrap();
        for _ in 0..100 {
            p = local_update(&spec, &p, &b, 0.5 / l, 1e9).unwrap();
        }
        assert!(loss(&spec, &p, &b).unwrap() < start);
    }

    #[test]
    fn mlp_init_is_bounded() {
        let spec = ModelSpec::mlp(16, 4, 3);
        let p = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let (first, second) = p.as_slice().split_at(16 * 4 + 4);
        assert!(first.iter().all(|v| v.abs() <= 0.25));
        assert!(second.iter().all(|v| v.abs() <= 0.5));
        assert!(first.iter().any(|&v| v != 0.0));
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(g in prop::collection::vec(-1e6f64..1e6, 1..64), c in 1e-3f64..1e3) {
            let mut g = g;
            clip_gradient(&mut g, c);
            prop_assert!(norm_sq(&g).sqrt() <= c + 1e-12);
        }

        #[test]
        fn update_displacement_is_bounded(seed in 0u64..1000, kind in 0usize..4, eta in 0.0f64..2.0, clip in 0.01f64..5.0) {
            let spec = all_specs()[kind].clone();
            let (p, x, y) = random_instance(&spec, 6, seed);
            let b = Batch::new(&x, &y, spec.input_dim).unwrap();
            let q = local_update(&spec, &p, &b, eta, clip).unwrap();
            let disp: f64 = p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!(disp <= eta * clip + 1e-12);
        }
    }
}
