//! Small differentiable models with exact gradients.
//!
//! Three objectives are supported, all over a flat [`ParamVector`]:
//!
//! * `quadratic`: `½‖θ − c‖²`, independent of the batch.
//! * `logistic-regression`: multinomial softmax regression. Parameters are a
//!   row-major `num_classes × (input_dim + 1)` matrix whose last column is the
//!   bias (the input is augmented with a constant 1).
//! * `mlp2`: one tanh hidden layer followed by a softmax output layer,
//!   `hidden × (input_dim + 1)` then `num_classes × (hidden + 1)`.
//!
//! Every objective adds `l2_coeff · ½‖θ‖²`. Losses are means over the batch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Quadratic,
    LogisticRegression,
    Mlp2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Width of the hidden layer; only read for `mlp2`.
    pub hidden_dim: usize,
    /// Minimizer of the quadratic objective; only read for `quadratic`.
    pub quadratic_center: Option<ParamVector>,
    pub l2_coeff: f64,
}

impl ModelSpec {
    pub fn quadratic(center: ParamVector) -> Self {
        ModelSpec {
            kind: ModelKind::Quadratic,
            input_dim: center.dim(),
            num_classes: 2,
            hidden_dim: 0,
            quadratic_center: Some(center),
            l2_coeff: 0.0,
        }
    }

    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticRegression,
            input_dim,
            num_classes,
            hidden_dim: 0,
            quadratic_center: None,
            l2_coeff: 0.0,
        }
    }

    pub fn mlp2(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp2,
            input_dim,
            num_classes,
            hidden_dim,
            quadratic_center: None,
            l2_coeff: 0.0,
        }
    }

    pub fn with_l2(mut self, l2_coeff: f64) -> Self {
        self.l2_coeff = l2_coeff;
        self
    }

    pub fn param_dim(&self) -> usize {
        match self.kind {
            ModelKind::Quadratic => self.input_dim,
            ModelKind::LogisticRegression => self.num_classes * (self.input_dim + 1),
            ModelKind::Mlp2 => {
                self.hidden_dim * (self.input_dim + 1) + self.num_classes * (self.hidden_dim + 1)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::invalid("l2_coeff must be a finite nonnegative number"));
        }
        match self.kind {
            ModelKind::Quadratic => match &self.quadratic_center {
                None => Err(Error::invalid("quadratic model requires quadratic_center")),
                Some(c) => {
                    c.ensure_dim(self.input_dim, "quadratic_center")?;
                    c.ensure_finite("quadratic_center")
                }
            },
            ModelKind::LogisticRegression | ModelKind::Mlp2 => {
                if self.num_classes < 2 {
                    return Err(Error::invalid("num_classes must be at least 2"));
                }
                if self.kind == ModelKind::Mlp2 && self.hidden_dim == 0 {
                    return Err(Error::invalid("mlp2 requires hidden_dim >= 1"));
                }
                Ok(())
            }
        }
    }

    /// Initial parameters: zeros for the convex models, scaled Gaussian
    /// weights for `mlp2` (a zero start would keep all hidden units equal).
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        match self.kind {
            ModelKind::Quadratic | ModelKind::LogisticRegression => {
                ParamVector::zeros(self.param_dim())
            }
            ModelKind::Mlp2 => {
                let mut values = Vec::with_capacity(self.param_dim());
                let w1 = Normal::new(0.0, 1.0 / ((self.input_dim + 1) as f64).sqrt()).unwrap();
                let w2 = Normal::new(0.0, 1.0 / ((self.hidden_dim + 1) as f64).sqrt()).unwrap();
                for _ in 0..self.hidden_dim * (self.input_dim + 1) {
                    values.push(w1.sample(rng));
                }
                for _ in 0..self.num_classes * (self.hidden_dim + 1) {
                    values.push(w2.sample(rng));
                }
                ParamVector::from_vec(values)
            }
        }
    }
}

/// A set of labeled samples, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::invalid(format!(
                "batch features have {} values, expected {} x {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Batch {
            features,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The sub-batch made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(rows.len() * self.input_dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::invalid(format!("row {r} out of range for batch of {}", self.len())));
            }
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Batch::new(features, labels, self.input_dim)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if spec.kind == ModelKind::Quadratic {
            return Ok(());
        }
        if self.input_dim != spec.input_dim {
            return Err(Error::invalid(format!(
                "batch input_dim {} does not match model input_dim {}",
                self.input_dim, spec.input_dim
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= spec.num_classes) {
            return Err(Error::invalid(format!(
                "label {y} out of range for {} classes",
                spec.num_classes
            )));
        }
        Ok(())
    }
}

fn check_inputs(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    params.ensure_dim(spec.param_dim(), "params")?;
    params.ensure_finite("params")?;
    batch.check(spec)
}

/// Overwrites `out` with softmax(`logits`) and returns log-sum-exp(`logits`).
fn softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

/// `out[r] = Σ_j w[r, j] · x̄_j` for a row-major `rows × (x.len() + 1)` matrix.
fn affine(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len() + 1;
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = row[cols - 1];
        for (a, b) in row[..cols - 1].iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// `grad[r, :] += coeff[r] · x̄` for a row-major `rows × (x.len() + 1)` matrix.
fn accumulate_outer(grad: &mut [f64], coeff: &[f64], x: &[f64]) {
    let cols = x.len() + 1;
    for (r, &c) in coeff.iter().enumerate() {
        let row = &mut grad[r * cols..(r + 1) * cols];
        for (g, &xj) in row[..cols - 1].iter_mut().zip(x) {
            *g += c * xj;
        }
        row[cols - 1] += c;
    }
}

fn l2_penalty(spec: &ModelSpec, params: &ParamVector) -> f64 {
    if spec.l2_coeff == 0.0 {
        0.0
    } else {
        0.5 * spec.l2_coeff * params.norm_sq()
    }
}

/// Mean loss of `params` on `batch`, plus the L2 penalty.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_inputs(spec, params, batch)?;
    let data_loss = match spec.kind {
        ModelKind::Quadratic => {
            let c = spec
                .quadratic_center
                .as_ref()
                .ok_or_else(|| Error::invalid("quadratic model requires quadratic_center"))?;
            0.5 * params.sub(c).norm_sq()
        }
        ModelKind::LogisticRegression => {
            let w = params.as_slice();
            let mut logits = vec![0.0; spec.num_classes];
            let mut probs = vec![0.0; spec.num_classes];
            let mut total = 0.0;
            for i in 0..batch.len() {
                affine(w, batch.row(i), &mut logits);
                let lse = softmax_into(&logits, &mut probs);
                total += lse - logits[batch.label(i)];
            }
            total / batch.len() as f64
        }
        ModelKind::Mlp2 => {
            let (w1, w2) = params.as_slice().split_at(spec.hidden_dim * (spec.input_dim + 1));
            let mut hidden = vec![0.0; spec.hidden_dim];
            let mut logits = vec![0.0; spec.num_classes];
            let mut probs = vec![0.0; spec.num_classes];
            let mut total = 0.0;
            for i in 0..batch.len() {
                affine(w1, batch.row(i), &mut hidden);
                hidden.iter_mut().for_each(|a| *a = a.tanh());
                affine(w2, &hidden, &mut logits);
                let lse = softmax_into(&logits, &mut probs);
                total += lse - logits[batch.label(i)];
            }
            total / batch.len() as f64
        }
    };
    let loss = data_loss + l2_penalty(spec, params);
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss evaluated to {loss}")));
    }
    Ok(loss)
}

/// Predicted class per sample (largest logit, lowest index on ties).
/// Quadratic models have no classes.
pub fn predict(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
    check_inputs(spec, params, batch)?;
    let mut logits = vec![0.0; spec.num_classes];
    let argmax = |z: &[f64]| (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best });
    match spec.kind {
        ModelKind::Quadratic => Err(Error::NotSupported("quadratic model has no class predictions".into())),
        ModelKind::LogisticRegression => Ok((0..batch.len())
            .map(|i| {
                affine(params.as_slice(), batch.row(i), &mut logits);
                argmax(&logits)
            })
            .collect()),
        ModelKind::Mlp2 => {
            let (w1, w2) = params.as_slice().split_at(spec.hidden_dim * (spec.input_dim + 1));
            let mut hidden = vec![0.0; spec.hidden_dim];
            Ok((0..batch.len())
                .map(|i| {
                    affine(w1, batch.row(i), &mut hidden);
                    hidden.iter_mut().for_each(|a| *a = a.tanh());
                    affine(w2, &hidden, &mut logits);
                    argmax(&logits)
                })
                .collect())
        }
    }
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let predicted = predict(spec, params, batch)?;
    let correct = predicted.iter().zip(batch.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Exact gradient of [`forward_loss`] with respect to `params`.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    check_inputs(spec, params, batch)?;
    let mut grad = vec![0.0; spec.param_dim()];
    match spec.kind {
        ModelKind::Quadratic => {
            let c = spec
                .quadratic_center
                .as_ref()
                .ok_or_else(|| Error::invalid("quadratic model requires quadratic_center"))?;
            for ((g, p), c) in grad.iter_mut().zip(params.as_slice()).zip(c.as_slice()) {
                *g = p - c;
            }
        }
        ModelKind::LogisticRegression => {
            let w = params.as_slice();
            let inv_n = 1.0 / batch.len() as f64;
            let mut logits = vec![0.0; spec.num_classes];
            let mut probs = vec![0.0; spec.num_classes];
            for i in 0..batch.len() {
                affine(w, batch.row(i), &mut logits);
                softmax_into(&logits, &mut probs);
                probs[batch.label(i)] -= 1.0;
                probs.iter_mut().for_each(|p| *p *= inv_n);
                accumulate_outer(&mut grad, &probs, batch.row(i));
            }
        }
        ModelKind::Mlp2 => {
            let split = spec.hidden_dim * (spec.input_dim + 1);
            let (w1, w2) = params.as_slice().split_at(split);
            let (g1, g2) = grad.split_at_mut(split);
            let inv_n = 1.0 / batch.len() as f64;
            let h = spec.hidden_dim;
            let mut hidden = vec![0.0; h];
            let mut logits = vec![0.0; spec.num_classes];
            let mut dz = vec![0.0; spec.num_classes];
            let mut dpre = vec![0.0; h];
            for i in 0..batch.len() {
                let x = batch.row(i);
                affine(w1, x, &mut hidden);
                hidden.iter_mut().for_each(|a| *a = a.tanh());
                affine(w2, &hidden, &mut logits);
                softmax_into(&logits, &mut dz);
                dz[batch.label(i)] -= 1.0;
                dz.iter_mut().for_each(|d| *d *= inv_n);
                accumulate_outer(g2, &dz, &hidden);
                for (m, dp) in dpre.iter_mut().enumerate() {
                    let back: f64 = dz
                        .iter()
                        .enumerate()
                        .map(|(c, d)| d * w2[c * (h + 1) + m])
                        .sum();
                    *dp = back * (1.0 - hidden[m] * hidden[m]);
                }
                accumulate_outer(g1, &dpre, x);
            }
        }
    }
    if spec.l2_coeff != 0.0 {
        for (g, p) in grad.iter_mut().zip(params.as_slice()) {
            *g += spec.l2_coeff * p;
        }
    }
    let grad = ParamVector::from_vec(grad);
    grad.ensure_finite("gradient")?;
    Ok(grad)
}

/// Central-difference estimate of the gradient, one coordinate at a time.
pub fn finite_diff_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    h: f64,
) -> Result<ParamVector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    check_inputs(spec, params, batch)?;
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.dim());
    for j in 0..params.dim() {
        let orig = probe[j];
        probe[j] = orig + h;
        let plus = forward_loss(spec, &probe, batch)?;
        probe[j] = orig - h;
        let minus = forward_loss(spec, &probe, batch)?;
        probe[j] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(ParamVector::from_vec(out))
}

const POWER_ITERATION_RTOL: f64 = 1e-8;
const POWER_ITERATION_MAX_ITERS: usize = 100_000;

/// Upper bound on the gradient Lipschitz constant of the full-data objective.
///
/// Quadratic: `1 + l2_coeff` (exact). Logistic regression: the softmax
/// cross-entropy Hessian is bounded by `½ (I − 11ᵀ/C) ⊗ X̄ᵀX̄/n`, whose top
/// eigenvalue is `½ λ_max(X̄ᵀX̄/n)`; `λ_max` comes from power iteration.
pub fn smoothness_constant(spec: &ModelSpec, data: &Batch) -> Result<f64> {
    spec.validate()?;
    match spec.kind {
        ModelKind::Quadratic => Ok(1.0 + spec.l2_coeff),
        ModelKind::LogisticRegression => {
            data.check(spec)?;
            let gram = augmented_gram(data);
            let lambda = power_iteration(&gram, data.input_dim() + 1)?;
            Ok(0.5 * lambda + spec.l2_coeff)
        }
        ModelKind::Mlp2 => Err(Error::NotSupported(
            "smoothness constant is only available for quadratic and logistic-regression models"
                .into(),
        )),
    }
}

/// Row-major `X̄ᵀX̄ / n` where `X̄` is the design matrix with a ones column.
pub fn augmented_gram(data: &Batch) -> Vec<f64> {
    let m = data.input_dim() + 1;
    let mut gram = vec![0.0; m * m];
    let mut xbar = vec![1.0; m];
    for i in 0..data.len() {
        xbar[..m - 1].copy_from_slice(data.row(i));
        for a in 0..m {
            for b in 0..m {
                gram[a * m + b] += xbar[a] * xbar[b];
            }
        }
    }
    let inv_n = 1.0 / data.len() as f64;
    gram.iter_mut().for_each(|g| *g *= inv_n);
    gram
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
fn power_iteration(matrix: &[f64], m: usize) -> Result<f64> {
    // Uneven start so the iterate is not orthogonal to the top eigenvector
    // in any symmetric configuration.
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut w = vec![0.0; m];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATION_MAX_ITERS {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        for (a, out) in w.iter_mut().enumerate() {
            *out = (0..m).map(|b| matrix[a * m + b] * v[b]).sum();
        }
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        if (next - lambda).abs() <= POWER_ITERATION_RTOL * next.abs() {
            return Ok(next);
        }
        lambda = next;
        std::mem::swap(&mut v, &mut w);
    }
    Err(Error::numeric("power iteration did not converge"))
}
