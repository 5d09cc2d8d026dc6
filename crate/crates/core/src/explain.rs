//! Interventional Shapley attributions for forest predictions.
//!
//! The value of a coalition `S` for an explained row `x` is the model output
//! averaged over background rows `b`, with features in `S` taken from `x` and
//! the rest from `b`:
//!
//! ```text
//! v(S) = mean_b f(x_S, b_{D\S})
//! phi_i = Σ_{S ⊆ D\{i}} |S|! (d-|S|-1)! / d! · (v(S ∪ {i}) - v(S))
//! ```
//!
//! [`shap_brute`] evaluates this definition literally over all 2^d
//! coalitions. [`shap_fast`] walks each tree once per background row: where
//! `x` and `b` disagree on a split, both branches are followed and the
//! feature is recorded as taken from `x` or from `b`. A leaf reached with `a`
//! features from `x` and `c` from `b` is reached exactly by the coalitions
//! containing the first set and avoiding the second, whose Shapley values
//! have a closed form.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learn::{argmax, Classifier, Forest, LearnError, Node, Tree};

/// Largest feature count [`shap_brute`] will enumerate.
pub const MAX_BRUTE_FEATURES: usize = 15;

/// Background size used when none is given.
pub const DEFAULT_BACKGROUND: usize = 64;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{d} features is too many for subset enumeration (max {max})")]
    TooManyFeatures { d: usize, max: usize },
    #[error("background sample is empty")]
    EmptyBackground,
    #[error("expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class {0} is outside the model's classes")]
    BadClass(usize),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

fn check_inputs(forest: &Forest, x: &[f64], background: &[Vec<f64>], class: usize) -> Result<(), ExplainError> {
    let d = forest.n_features();
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    if class >= forest.n_classes() {
        return Err(ExplainError::BadClass(class));
    }
    for row in std::iter::once(x).chain(background.iter().map(Vec::as_slice)) {
        if row.len() != d {
            return Err(ExplainError::DimensionMismatch {
                expected: d,
                found: row.len(),
            });
        }
    }
    Ok(())
}

/// Predicted class of `x`, the default explanation target.
pub fn predicted_class(forest: &Forest, x: &[f64]) -> Result<usize, ExplainError> {
    Ok(forest.predict(x)?.class)
}

/// Subset-enumeration oracle for the predicted class of `x`.
pub fn shap_brute(forest: &Forest, x: &[f64], background: &[Vec<f64>]) -> Result<Vec<f64>, ExplainError> {
    let class = predicted_class(forest, x)?;
    shap_brute_for_class(forest, x, background, class)
}

pub fn shap_brute_for_class(
    forest: &Forest,
    x: &[f64],
    background: &[Vec<f64>],
    class: usize,
) -> Result<Vec<f64>, ExplainError> {
    let d = forest.n_features();
    if d > MAX_BRUTE_FEATURES {
        return Err(ExplainError::TooManyFeatures {
            d,
            max: MAX_BRUTE_FEATURES,
        });
    }
    check_inputs(forest, x, background, class)?;
    let n_sets = 1usize << d;
    let values = (0..n_sets)
        .into_par_iter()
        .map(|mask| {
            let mut row = vec![0.0; d];
            let mut total = 0.0;
            for b in background {
                for j in 0..d {
                    row[j] = if mask >> j & 1 == 1 { x[j] } else { b[j] };
                }
                total += forest.predict_proba(&row)?[class];
            }
            Ok(total / background.len() as f64)
        })
        .collect::<Result<Vec<f64>, LearnError>>()?;

    let fact: Vec<f64> = (0..=d).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let weight: Vec<f64> = (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect();
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in (0..n_sets).filter(|m| m & bit == 0) {
            *p += weight[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
        }
    }
    Ok(phi)
}

/// 1 / (m · C(m-1, r)): the Shapley weight shared by the closed forms.
fn inv_weight(m: usize, r: usize) -> f64 {
    let mut binom = 1.0;
    for k in 0..r {
        binom = binom * (m - 1 - k) as f64 / (k + 1) as f64;
    }
    1.0 / (m as f64 * binom)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Source {
    Unset,
    FromX,
    FromB,
}

struct Walk<'a> {
    tree: &'a Tree,
    x: &'a [f64],
    b: &'a [f64],
    class: usize,
    source: Vec<Source>,
    path: Vec<usize>,
    phi: &'a mut [f64],
}

impl Walk<'_> {
    fn go(&mut self, node: usize, a: usize, c: usize) {
        match &self.tree.nodes()[node] {
            Node::Leaf { .. } => {
                if a + c == 0 {
                    return;
                }
                let v = self.tree.leaf_distribution(node)[self.class];
                let m = a + c;
                let pos = if a > 0 { v * inv_weight(m, a - 1) } else { 0.0 };
                let neg = if c > 0 { v * inv_weight(m, a) } else { 0.0 };
                for &f in &self.path {
                    match self.source[f] {
                        Source::FromX => self.phi[f] += pos,
                        Source::FromB => self.phi[f] -= neg,
                        Source::Unset => unreachable!("path features always have a source"),
                    }
                }
            }
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let f = *feature;
                let x_child = if self.x[f] <= *threshold { *left } else { *right };
                let b_child = if self.b[f] <= *threshold { *left } else { *right };
                if x_child == b_child {
                    return self.go(x_child, a, c);
                }
                match self.source[f] {
                    Source::FromX => self.go(x_child, a, c),
                    Source::FromB => self.go(b_child, a, c),
                    Source::Unset => {
                        self.path.push(f);
                        self.source[f] = Source::FromX;
                        self.go(x_child, a + 1, c);
                        self.source[f] = Source::FromB;
                        self.go(b_child, a, c + 1);
                        self.source[f] = Source::Unset;
                        self.path.pop();
                    }
                }
            }
        }
    }
}

/// Tree-walking attribution for the predicted class of `x`; equal to
/// [`shap_brute`] up to rounding, for any number of features.
pub fn shap_fast(forest: &Forest, x: &[f64], background: &[Vec<f64>]) -> Result<Vec<f64>, ExplainError> {
    let class = predicted_class(forest, x)?;
    shap_fast_for_class(forest, x, background, class)
}

pub fn shap_fast_for_class(
    forest: &Forest,
    x: &[f64],
    background: &[Vec<f64>],
    class: usize,
) -> Result<Vec<f64>, ExplainError> {
    check_inputs(forest, x, background, class)?;
    let d = forest.n_features();
    let mut phi = vec![0.0; d];
    let mut source = vec![Source::Unset; d];
    for tree in forest.trees() {
        for b in background {
            let mut walk = Walk {
                tree,
                x,
                b,
                class,
                source: std::mem::take(&mut source),
                path: Vec::new(),
                phi: &mut phi,
            };
            walk.go(0, 0, 0);
            source = walk.source;
        }
    }
    let scale = (forest.trees().len() * background.len()) as f64;
    phi.iter_mut().for_each(|p| *p /= scale);
    Ok(phi)
}

/// Expected model output for `class` over the background.
pub fn base_value(forest: &Forest, background: &[Vec<f64>], class: usize) -> Result<f64, ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    let mut total = 0.0;
    for b in background {
        total += forest.predict_proba(b)?[class];
    }
    Ok(total / background.len() as f64)
}

/// Attribution of one row: `base_value + Σ phi = prediction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub target_class: usize,
    pub base_value: f64,
    pub prediction: f64,
    pub phi: Vec<f64>,
}

impl Explanation {
    /// |base + Σ phi − f(x)|.
    pub fn local_accuracy_gap(&self) -> f64 {
        (self.base_value + self.phi.iter().sum::<f64>() - self.prediction).abs()
    }
}

/// Explains `x` for `class`, or for its predicted class when `None`.
pub fn explain(
    forest: &Forest,
    x: &[f64],
    background: &[Vec<f64>],
    class: Option<usize>,
) -> Result<Explanation, ExplainError> {
    let probabilities = forest.predict_proba(x)?;
    let target_class = class.unwrap_or_else(|| argmax(&probabilities));
    let phi = shap_fast_for_class(forest, x, background, target_class)?;
    Ok(Explanation {
        target_class,
        base_value: base_value(forest, background, target_class)?,
        prediction: probabilities[target_class],
        phi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub rank: usize,
    pub name: String,
    pub mean_abs_phi: f64,
}

/// Ranks features by mean |phi| over `rows` (each explained for its own
/// predicted class). Ties are ordered by name.
pub fn global_importance(
    forest: &Forest,
    rows: &[Vec<f64>],
    background: &[Vec<f64>],
    names: &[String],
) -> Result<Vec<RankedFeature>, ExplainError> {
    let d = forest.n_features();
    if names.len() != d {
        return Err(ExplainError::DimensionMismatch {
            expected: d,
            found: names.len(),
        });
    }
    let phis = rows
        .par_iter()
        .map(|x| shap_fast(forest, x, background))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rank_features(&phis, names))
}

/// Mean |phi| per feature over a set of explanations, ranked.
pub fn rank_features(phis: &[Vec<f64>], names: &[String]) -> Vec<RankedFeature> {
    let n = phis.len().max(1) as f64;
    let mut ranked: Vec<RankedFeature> = names
        .iter()
        .enumerate()
        .map(|(j, name)| RankedFeature {
            rank: 0,
            name: name.clone(),
            mean_abs_phi: phis.iter().map(|p| p[j].abs()).sum::<f64>() / n,
        })
        .collect();
    ranked.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi).then_with(|| a.name.cmp(&b.name)));
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    ranked
}

/// Up to `n` background rows drawn without replacement with a fixed seed.
pub fn sample_background(rows: &[Vec<f64>], n: usize, seed: u64) -> Vec<Vec<f64>> {
    if rows.len() <= n {
        return rows.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, rows.len(), n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| rows[i].clone()).collect()
}

/// Named explanation of one ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub id: String,
    pub target_class: String,
    pub base_value: f64,
    pub prediction: f64,
    pub phi: Vec<NamedValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

/// Explanation document: per-ROI attributions plus the global ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub background_size: usize,
    pub instances: Vec<InstanceReport>,
    pub global: Vec<RankedFeature>,
}

impl ShapReport {
    /// Builds the full report for `rows` with ids `ids`, explaining `class`
    /// or, when `None`, each row's predicted class.
    pub fn build(
        forest: &Forest,
        ids: &[String],
        rows: &[Vec<f64>],
        background: &[Vec<f64>],
        names: &[String],
        class_names: &[String],
        class: Option<usize>,
    ) -> Result<Self, ExplainError> {
        let explanations = rows
            .par_iter()
            .map(|x| explain(forest, x, background, class))
            .collect::<Result<Vec<_>, _>>()?;
        let phis: Vec<Vec<f64>> = explanations.iter().map(|e| e.phi.clone()).collect();
        let instances = ids
            .iter()
            .zip(explanations)
            .map(|(id, e)| InstanceReport {
                id: id.clone(),
                target_class: class_names
                    .get(e.target_class)
                    .cloned()
                    .unwrap_or_else(|| e.target_class.to_string()),
                base_value: e.base_value,
                prediction: e.prediction,
                phi: names
                    .iter()
                    .zip(&e.phi)
                    .map(|(n, v)| NamedValue {
                        name: n.clone(),
                        value: *v,
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            background_size: background.len(),
            instances,
            global: rank_features(&phis, names),
        })
    }

    /// `rank<TAB>feature` table of the top `k` features.
    pub fn top_k_table(&self, k: usize) -> String {
        let mut s = String::from("rank\tfeature\tmean|phi|\n");
        for r in self.global.iter().take(k) {
            s.push_str(&format!("{}\t{}\t{:.6}\n", r.rank, r.name, r.mean_abs_phi));
        }
        s
    }
}
