//! Training objectives: rate classification, weighted reconstruction,
//! and their joint combination.

use ndarray::{Array2, Array4, Array5, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixing weights of the joint objective
/// `L = lambda_d·L_d + lambda_g·L_g`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 0.1,
            lambda_g: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_d < 0.0 || self.lambda_g < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scalar losses of one batch, as logged per epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub l_d: f64,
    pub l_g: f64,
    pub joint: f64,
    pub dp_accuracy: f64,
}

/// Probability floor inside the cross-entropy logarithm.
const LOG_FLOOR: f64 = 1e-12;

fn check_labels(rows: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if rows == 0 || classes == 0 {
        return Err(Error::Input("logits must be non-empty".into()));
    }
    if labels.len() != rows {
        return Err(Error::Input(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction, in `f64` precision.
fn softmax_rows_f64<F: NdFloat>(logits: &Array2<F>) -> Array2<f64> {
    let (n, c) = logits.dim();
    let mut probs = Array2::zeros((n, c));
    for i in 0..n {
        let row = logits.row(i);
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64().unwrap()));
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j].to_f64().unwrap() - max).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        for j in 0..c {
            probs[(i, j)] /= sum;
        }
    }
    probs
}

/// Row-wise softmax probabilities in the working precision.
pub fn softmax_rows<F: NdFloat>(logits: &Array2<F>) -> Array2<F> {
    softmax_rows_f64(logits).mapv(|v| F::from(v).unwrap())
}

/// Playback-rate classification loss: numerically stabilized softmax
/// cross-entropy, averaged over the batch.
pub fn discriminative_loss<F: NdFloat>(logits: &Array2<F>, labels: &[usize]) -> Result<f64> {
    discriminative_loss_grad(logits, labels).map(|(l, _)| l)
}

/// [`discriminative_loss`] together with its gradient
/// `∂L/∂logits = (softmax − onehot) / N`.
pub fn discriminative_loss_grad<F: NdFloat>(
    logits: &Array2<F>,
    labels: &[usize],
) -> Result<(f64, Array2<F>)> {
    let (n, c) = logits.dim();
    check_labels(n, c, labels)?;
    let probs = softmax_rows_f64(logits);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, c));
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        loss -= probs[(i, labels[i])].max(LOG_FLOOR).ln();
        for j in 0..c {
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            grad[(i, j)] = F::from((probs[(i, j)] - onehot) * inv_n).unwrap();
        }
    }
    Ok((loss * inv_n, grad))
}

/// Fraction of rows whose argmax equals the label (ties resolve to the
/// first maximal index).
pub fn dp_accuracy<F: NdFloat>(logits: &Array2<F>, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dim();
    check_labels(n, c, labels)?;
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        hits += usize::from(best == label);
    }
    Ok(hits as f64 / n as f64)
}

fn check_recon_shapes<F: NdFloat>(
    pred: &Array5<F>,
    target: &Array5<F>,
    attention: &Array4<F>,
) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Input(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    let (n, _, t, h, w) = pred.dim();
    if attention.dim() != (n, t, h, w) {
        return Err(Error::Input(format!(
            "attention {:?} does not match clip layout ({n}, {t}, {h}, {w})",
            attention.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("reconstruction tensors are empty".into()));
    }
    Ok(())
}

/// Slow-down reconstruction loss: the mean over every element of
/// `attention·(pred − target)²`, with the attention map broadcast across
/// channels. With unit attention this is exactly mean squared error.
pub fn generative_loss<F: NdFloat>(
    pred: &Array5<F>,
    target: &Array5<F>,
    attention: &Array4<F>,
) -> Result<f64> {
    check_recon_shapes(pred, target, attention)?;
    let (n, c, t, h, w) = pred.dim();
    let mut acc = 0.0f64;
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let d = (pred[(ni, ci, ti, hi, wi)] - target[(ni, ci, ti, hi, wi)])
                            .to_f64()
                            .unwrap();
                        acc += attention[(ni, ti, hi, wi)].to_f64().unwrap() * d * d;
                    }
                }
            }
        }
    }
    Ok(acc / pred.len() as f64)
}

/// [`generative_loss`] together with its gradient
/// `∂L/∂pred = 2·attention·(pred − target) / len(pred)`.
pub fn generative_loss_grad<F: NdFloat>(
    pred: &Array5<F>,
    target: &Array5<F>,
    attention: &Array4<F>,
) -> Result<(f64, Array5<F>)> {
    let loss = generative_loss(pred, target, attention)?;
    let (n, c, t, h, w) = pred.dim();
    let scale = F::from(2.0 / pred.len() as f64).unwrap();
    let mut grad = Array5::zeros(pred.raw_dim());
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let idx = (ni, ci, ti, hi, wi);
                        grad[idx] = scale
                            * attention[(ni, ti, hi, wi)]
                            * (pred[idx] - target[idx]);
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

/// `lambda_d·l_d + lambda_g·l_g`.
pub fn joint_loss(l_d: f64, l_g: f64, weights: &LossWeights) -> f64 {
    weights.lambda_d * l_d + weights.lambda_g * l_g
}
