//! Convex multinomial logistic regression: loss, gradient, clipping, accuracy.
//!
//! Parameters are a flat vector of length `p = n_features * n_classes`,
//! laid out feature-major: entry `j * n_classes + k` is the weight of
//! feature `j` for class `k`.

use ndarray::{Array1, ArrayView1};

use crate::data::Dataset;
use crate::error::{FedDpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    L1,
    L2,
}

/// Flat model parameters of length `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(pub Array1<f64>);

impl ModelParams {
    pub fn zeros(p: usize) -> Self {
        Self(Array1::zeros(p))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn check_shape(params: &ArrayView1<f64>, dataset: &Dataset) -> Result<()> {
    if params.len() != dataset.param_dim() {
        return Err(FedDpError::InvalidParameter(format!(
            "params length {} but data implies p = {}",
            params.len(),
            dataset.param_dim()
        )));
    }
    Ok(())
}

/// Per-sample class logits z_k = Σ_j x_j W[j,k].
fn logits(params: &ArrayView1<f64>, x: ArrayView1<f64>, n_classes: usize) -> Vec<f64> {
    let mut z = vec![0.0; n_classes];
    for (j, &xj) in x.iter().enumerate() {
        let row = &params.as_slice().expect("contiguous params")[j * n_classes..(j + 1) * n_classes];
        for (k, &w) in row.iter().enumerate() {
            z[k] += xj * w;
        }
    }
    z
}

fn log_softmax_denominator(z: &[f64]) -> (f64, f64) {
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
    (zmax, sum_exp)
}

/// Mean cross-entropy of the softmax model over the batch.
pub fn loss(params: &ArrayView1<f64>, batch: &Dataset) -> Result<f64> {
    check_shape(params, batch)?;
    if batch.n_samples() == 0 {
        return Err(FedDpError::EmptyBatch);
    }
    let n_classes = batch.n_classes();
    let mut total = 0.0;
    for (x, &y) in batch.features().rows().into_iter().zip(batch.labels()) {
        let z = logits(params, x, n_classes);
        let (zmax, sum_exp) = log_softmax_denominator(&z);
        total += zmax + sum_exp.ln() - z[y];
    }
    Ok(total / batch.n_samples() as f64)
}

/// Mean of per-sample gradients of the cross-entropy loss.
pub fn gradient(params: &ArrayView1<f64>, batch: &Dataset) -> Result<Array1<f64>> {
    check_shape(params, batch)?;
    if batch.n_samples() == 0 {
        return Err(FedDpError::EmptyBatch);
    }
    let n_classes = batch.n_classes();
    let mut grad = Array1::<f64>::zeros(params.len());
    let grad_slice = grad.as_slice_mut().expect("contiguous grad");
    for (x, &y) in batch.features().rows().into_iter().zip(batch.labels()) {
        let z = logits(params, x, n_classes);
        let (zmax, sum_exp) = log_softmax_denominator(&z);
        // residual_k = softmax_k - 1{k = y}
        let mut residual: Vec<f64> = z.iter().map(|&v| (v - zmax).exp() / sum_exp).collect();
        residual[y] -= 1.0;
        for (j, &xj) in x.iter().enumerate() {
            let row = &mut grad_slice[j * n_classes..(j + 1) * n_classes];
            for (k, r) in residual.iter().enumerate() {
                row[k] += xj * r;
            }
        }
    }
    let scale = 1.0 / batch.n_samples() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

pub fn vector_norm(values: &ArrayView1<f64>, order: NormOrder) -> f64 {
    match order {
        NormOrder::L1 => values.iter().map(|v| v.abs()).sum(),
        NormOrder::L2 => values.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Norm-rescaling clip: unchanged when within the bound, else scaled onto it.
pub fn clip_gradient(
    grad: &ArrayView1<f64>,
    bound: f64,
    order: NormOrder,
) -> Result<Array1<f64>> {
    if bound <= 0.0 {
        return Err(FedDpError::InvalidParameter(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    let norm = vector_norm(grad, order);
    // The ulp slack makes clipping exactly idempotent: rescaling can leave the
    // recomputed norm a hair above the bound.
    if norm <= bound * (1.0 + 4.0 * f64::EPSILON) {
        Ok(grad.to_owned())
    } else {
        Ok(grad.mapv(|v| v * bound / norm))
    }
}

/// Argmax-class match rate; ties resolve to the lowest class index.
pub fn accuracy(params: &ArrayView1<f64>, dataset: &Dataset) -> Result<f64> {
    check_shape(params, dataset)?;
    if dataset.n_samples() == 0 {
        return Err(FedDpError::EmptyBatch);
    }
    let n_classes = dataset.n_classes();
    let mut correct = 0usize;
    for (x, &y) in dataset.features().rows().into_iter().zip(dataset.labels()) {
        let z = logits(params, x, n_classes);
        let mut best = 0usize;
        for (k, &v) in z.iter().enumerate().skip(1) {
            if v > z[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.n_samples() as f64)
}

/// Full-batch gradient descent to (near) the optimum of the convex loss.
///
/// Serves as the centralized reference both for tests and for constant
/// estimation. An optional ridge term keeps the objective strongly convex.
pub fn train_centralized(
    dataset: &Dataset,
    steps: usize,
    learning_rate: f64,
    l2_reg: f64,
) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(dataset.param_dim());
    for _ in 0..steps {
        let mut grad = gradient(&params.0.view(), dataset)?;
        if l2_reg > 0.0 {
            grad = grad + &(&params.0 * l2_reg);
        }
        params.0 = &params.0 - &(grad * learning_rate);
    }
    Ok(params)
}
