//! Multinomial logistic regression with L2 penalty, trained by seeded SGD.
//! The linear classifier used at the end of the recognition pipeline.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{PsdError, Result};
use crate::rng::Rng;

/// Affine multi-class scorer; predictions are score argmax.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    /// classes x features.
    weights: Array2<f64>,
    bias: Array1<f64>,
    l2_weight: f64,
}

impl LinearClassifier {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn l2_weight(&self) -> f64 {
        self.l2_weight
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn scores(&self, features: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&features) + &self.bias
    }

    /// Predicted class id (ties break to the lowest id).
    pub fn predict(&self, features: ArrayView1<f64>) -> usize {
        let s = self.scores(features);
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }

    /// Fraction of rows classified correctly.
    pub fn accuracy(&self, features: &Array2<f64>, labels: &[usize]) -> f64 {
        let correct = features
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &l)| self.predict(row.view()) == l)
            .count();
        correct as f64 / labels.len() as f64
    }
}

fn softmax_in_place(scores: &mut Array1<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores.mapv_inplace(|s| (s - max).exp());
    let total = scores.sum();
    scores.mapv_inplace(|s| s / total);
}

/// Train multinomial logistic regression by per-sample SGD with an L2
/// penalty on the weights (bias unregularized). Deterministic per seed.
/// Rows of `features` are samples; `labels` are class ids 0..C-1 and at
/// least two classes must be present.
pub fn train_linear_classifier(
    features: &Array2<f64>,
    labels: &[usize],
    l2_weight: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearClassifier> {
    if features.nrows() == 0 {
        return Err(PsdError::InvalidInput("no training samples".into()));
    }
    if features.nrows() != labels.len() {
        return Err(PsdError::ShapeMismatch(format!(
            "{} feature rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if l2_weight < 0.0 {
        return Err(PsdError::InvalidParameter("l2 weight must be >= 0".into()));
    }
    if epochs == 0 {
        return Err(PsdError::InvalidParameter("epochs must be >= 1".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(PsdError::NonFinite("features must be finite".into()));
    }
    let classes = labels.iter().copied().max().unwrap() + 1;
    let mut present = vec![false; classes];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(PsdError::InvalidInput("need at least two classes".into()));
    }

    let dim = features.ncols();
    let mut weights = Array2::zeros((classes, dim));
    let mut bias = Array1::zeros(classes);
    let base_rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut t = 0u64;

    for epoch in 0..epochs {
        let mut shuffle_rng = base_rng.fork(0xC1A5_u64.wrapping_add(epoch as u64));
        shuffle_rng.shuffle(&mut order);
        for &idx in &order {
            let lr = 0.5 / (1.0 + 1e-3 * t as f64);
            t += 1;
            let x = features.row(idx);
            let mut p = weights.dot(&x) + &bias;
            softmax_in_place(&mut p);
            for c in 0..classes {
                let err = p[c] - if c == labels[idx] { 1.0 } else { 0.0 };
                if err != 0.0 {
                    let mut row = weights.row_mut(c);
                    row.scaled_add(-lr * err, &x);
                    bias[c] -= lr * err;
                }
            }
            // decoupled L2 shrink after the data step, clamped so huge
            // penalties collapse the weights instead of oscillating
            let shrink = (1.0 - lr * l2_weight).max(0.0);
            if shrink != 1.0 {
                weights.mapv_inplace(|w| w * shrink);
            }
        }
    }
    Ok(LinearClassifier {
        weights,
        bias,
        l2_weight,
    })
}
