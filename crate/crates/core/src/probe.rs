//! Multinomial logistic-regression probes. These are diagnostic-only linear
//! classifiers fit on frozen feature vectors (domain separability checks,
//! representation probes); nothing here touches the autodiff tape.
//!
//! Fitting is deterministic: zero init, feature standardization from the
//! training set, full-batch gradient descent with backtracking halving of the
//! step size whenever the loss fails to decrease.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LogisticProbe {
    /// Row-major `[classes, dim]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
}

pub const PROBE_EPOCHS: usize = 400;
pub const PROBE_LR: f64 = 1.0;

impl LogisticProbe {
    /// Fit with the default epoch/step budget, which is enough for the small
    /// feature sets used here to reach a stable decision rule.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        Self::fit_with(features, labels, classes, PROBE_EPOCHS, PROBE_LR)
    }

    pub fn fit_with(
        features: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        epochs: usize,
        lr0: f64,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("probe needs at least 2 classes"));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("inconsistent feature dimensions"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }

        let n = features.len();
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut std = vec![0.0; dim];
        for f in features {
            for (s, (v, m)) in std.iter_mut().zip(f.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n as f64).sqrt().max(1e-8);
        }
        let x: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| (v - m) / s).collect())
            .collect();

        let mut probe = LogisticProbe {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            mean,
            std,
            classes,
            dim,
        };
        let mut lr = lr0;
        let mut loss = probe.loss_standardized(&x, labels);
        for _ in 0..epochs {
            let (gw, gb) = probe.grad_standardized(&x, labels);
            loop {
                let mut trial = probe.clone();
                for (w, g) in trial.weights.iter_mut().zip(&gw) {
                    *w -= lr * g;
                }
                for (b, g) in trial.bias.iter_mut().zip(&gb) {
                    *b -= lr * g;
                }
                let trial_loss = trial.loss_standardized(&x, labels);
                if trial_loss <= loss || lr < 1e-9 {
                    probe.weights = trial.weights;
                    probe.bias = trial.bias;
                    loss = trial_loss;
                    break;
                }
                lr *= 0.5;
            }
        }
        Ok(probe)
    }

    fn logits_standardized(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * self.dim..(c + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    fn probs_standardized(&self, x: &[f64]) -> Vec<f64> {
        let logits = self.logits_standardized(x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    fn loss_standardized(&self, x: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (xi, &yi) in x.iter().zip(labels) {
            total -= self.probs_standardized(xi)[yi].max(1e-300).ln();
        }
        total / x.len() as f64
    }

    fn grad_standardized(&self, x: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.classes * self.dim];
        let mut gb = vec![0.0; self.classes];
        for (xi, &yi) in x.iter().zip(labels) {
            let p = self.probs_standardized(xi);
            for c in 0..self.classes {
                let d = p[c] - if c == yi { 1.0 } else { 0.0 };
                gb[c] += d;
                for (g, v) in gw[c * self.dim..(c + 1) * self.dim].iter_mut().zip(xi) {
                    *g += d * v;
                }
            }
        }
        let n = x.len() as f64;
        gw.iter_mut().for_each(|g| *g /= n);
        gb.iter_mut().for_each(|g| *g /= n);
        (gw, gb)
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let x: Vec<f64> = features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let logits = self.logits_standardized(&x);
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        hits as f64 / features.len() as f64
    }
}
