use serde::{Deserialize, Serialize};

use super::LearnError;

/// Square confusion matrix, `counts[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_pairs(n_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::new(n_classes);
        for (a, p) in pairs {
            m.add(a, p);
        }
        m
    }

    pub fn add(&mut self, actual: usize, predicted: usize) {
        self.counts[actual][predicted] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.correct() as f64 / t as f64
        }
    }

    /// (TP, FN, FP, TN) with `positive` against every other class.
    pub fn one_vs_rest(&self, positive: usize) -> (u64, u64, u64, u64) {
        let n = self.n_classes();
        let mut tp = 0;
        let mut fn_ = 0;
        let mut fp = 0;
        let mut tn = 0;
        for a in 0..n {
            for p in 0..n {
                let c = self.counts[a][p];
                match (a == positive, p == positive) {
                    (true, true) => tp += c,
                    (true, false) => fn_ += c,
                    (false, true) => fp += c,
                    (false, false) => tn += c,
                }
            }
        }
        (tp, fn_, fp, tn)
    }
}

/// Sensitivity, specificity, accuracy and F1 for one positive class.
/// Metrics whose denominator is zero are reported as 0 and named in
/// `degenerate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(confusion: &ConfusionMatrix, positive: usize) -> Result<BinaryMetrics, LearnError> {
    if confusion.total() == 0 {
        return Err(LearnError::EmptyConfusion);
    }
    if positive >= confusion.n_classes() {
        return Err(LearnError::Invalid(format!(
            "positive class {positive} outside {} classes",
            confusion.n_classes()
        )));
    }
    let (tp, fn_, fp, tn) = confusion.one_vs_rest(positive);
    let mut degenerate = Vec::new();
    Ok(BinaryMetrics {
        sensitivity: ratio(tp, tp + fn_, "sensitivity", &mut degenerate),
        specificity: ratio(tn, tn + fp, "specificity", &mut degenerate),
        accuracy: ratio(tp + tn, tp + tn + fp + fn_, "accuracy", &mut degenerate),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, "f1", &mut degenerate),
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}
