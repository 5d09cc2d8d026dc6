//! CART decision trees with Gini splits, bagged into a random forest.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampling::{balanced_sample, derive_seed};
use super::LearnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        samples: usize,
    },
    /// Class counts of the training samples that reached this leaf.
    Leaf { counts: Vec<u32> },
}

/// Binary tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    /// Builds a tree from explicit nodes, checking that every child index is
    /// in range, every node is reachable exactly once and leaves are non-empty.
    pub fn from_nodes(nodes: Vec<Node>, n_classes: usize) -> Result<Self, LearnError> {
        if nodes.is_empty() {
            return Err(LearnError::Invalid("tree has no nodes".into()));
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if i >= nodes.len() || seen[i] {
                return Err(LearnError::Invalid(format!("node {i} out of range or shared")));
            }
            seen[i] = true;
            match &nodes[i] {
                Node::Split {
                    threshold, left, right, ..
                } => {
                    if !threshold.is_finite() {
                        return Err(LearnError::Invalid(format!("node {i} has a non-finite threshold")));
                    }
                    stack.push(*left);
                    stack.push(*right);
                }
                Node::Leaf { counts } => {
                    if counts.len() != n_classes || counts.iter().all(|c| *c == 0) {
                        return Err(LearnError::Invalid(format!("leaf {i} has invalid counts {counts:?}")));
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(LearnError::Invalid("tree has unreachable nodes".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { .. } => return i,
            }
        }
    }

    /// Class-frequency vector of leaf `i`.
    pub fn leaf_distribution(&self, i: usize) -> Vec<f64> {
        match &self.nodes[i] {
            Node::Leaf { counts } => {
                let total: u32 = counts.iter().sum();
                counts.iter().map(|c| *c as f64 / total as f64).collect()
            }
            Node::Split { .. } => panic!("node {i} is not a leaf"),
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        self.leaf_distribution(self.leaf_index(x))
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }

    /// Features used by any split.
    pub fn used_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features examined per split; `None` means ⌈√d⌉.
    pub features_per_split: Option<usize>,
    /// Train each tree on a class-balanced bootstrap of size n. When false
    /// every tree sees the full training set.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn mtry(&self, d: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

/// Class prediction with its probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Index of the maximum; ties go to the lower index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps a feature row to class probabilities.
pub trait Classifier {
    fn n_features(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, LearnError>;

    fn predict(&self, x: &[f64]) -> Result<Prediction, LearnError> {
        let probabilities = self.predict_proba(x)?;
        Ok(Prediction {
            class: argmax(&probabilities),
            probabilities,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
    n_classes: usize,
    params: ForestParams,
}

impl Forest {
    /// Assembles a forest from prebuilt trees.
    pub fn from_trees(trees: Vec<Tree>, n_features: usize, n_classes: usize) -> Result<Self, LearnError> {
        if trees.is_empty() {
            return Err(LearnError::Invalid("forest needs at least one tree".into()));
        }
        for t in &trees {
            for n in &t.nodes {
                match n {
                    Node::Split { feature, .. } if *feature >= n_features => {
                        return Err(LearnError::Invalid(format!("split on feature {feature} >= {n_features}")))
                    }
                    Node::Leaf { counts } if counts.len() != n_classes => {
                        return Err(LearnError::Invalid("leaf class count mismatch".into()))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            params: ForestParams {
                n_trees: trees.len(),
                ..ForestParams::default()
            },
            trees,
            n_features,
            n_classes,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }
}

impl Classifier for Forest {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Mean of the leaf class-frequency vectors over all trees.
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        if x.len() != self.n_features {
            return Err(LearnError::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        let mut p = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (acc, v) in p.iter_mut().zip(t.predict_proba(x)) {
                *acc += v;
            }
        }
        let n = self.trees.len() as f64;
        p.iter_mut().for_each(|v| *v /= n);
        Ok(p)
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<Node>,
}

fn class_counts(y: &[usize], idx: &[usize], n_classes: usize) -> Vec<u32> {
    let mut c = vec![0u32; n_classes];
    for &i in idx {
        c[y[i]] += 1;
    }
    c
}

/// Σ c² / n for one side of a split; larger means purer.
#[inline]
fn purity(counts: &[u32], n: u32) -> f64 {
    counts.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>() / n as f64
}

impl Builder<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = class_counts(self.y, &idx, self.n_classes);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { counts: counts.clone() });

        let pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        let depth_capped = self.params.max_depth.is_some_and(|m| depth >= m);
        if pure || depth_capped || idx.len() < 2 * self.params.min_leaf.max(1) {
            return slot;
        }
        let Some((feature, threshold)) = self.best_split(&idx, rng) else {
            return slot;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let samples = idx.len();
        let left = self.grow(left_idx, depth + 1, rng);
        let right = self.grow(right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
            samples,
        };
        slot
    }

    /// Scans features in random order until `mtry` non-constant ones have
    /// been evaluated; returns the split with the lowest weighted Gini.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let d = self.x[0].len();
        let min_leaf = self.params.min_leaf.max(1);
        let total = class_counts(self.y, idx, self.n_classes);
        let n = idx.len();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut evaluated = 0;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
        for feature in index::sample(rng, d, d) {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x[i][feature], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[n - 1].0 {
                continue;
            }
            evaluated += 1;
            let mut left = vec![0u32; self.n_classes];
            let mut right = total.clone();
            for pos in 1..n {
                let c = pairs[pos - 1].1;
                left[c] += 1;
                right[c] -= 1;
                let (lo, hi) = (pairs[pos - 1].0, pairs[pos].0);
                if lo == hi || pos < min_leaf || n - pos < min_leaf {
                    continue;
                }
                let score = purity(&left, pos as u32) + purity(&right, (n - pos) as u32);
                if best.is_none_or(|(s, _, _)| score > s) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((score, feature, threshold));
                }
            }
            if evaluated >= self.mtry {
                break;
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Grows one CART tree on the rows listed in `sample` (duplicates allowed).
pub fn train_tree(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    sample: Vec<usize>,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let mut b = Builder {
        x,
        y,
        n_classes,
        params,
        mtry: params.mtry(x[0].len()),
        nodes: Vec::new(),
    };
    b.grow(sample, 0, rng);
    Tree { nodes: b.nodes }
}

/// Trains `params.n_trees` trees in parallel. Tree `t` draws from its own
/// stream seeded by `(seed, t)`, so the result does not depend on scheduling.
pub fn train_forest(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<Forest, LearnError> {
    let n = x.len();
    if n < 2 {
        return Err(LearnError::Degenerate(format!("need at least 2 training rows, got {n}")));
    }
    if y.len() != n {
        return Err(LearnError::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    let d = x[0].len();
    if d == 0 {
        return Err(LearnError::Invalid("rows have no features".into()));
    }
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(LearnError::DimensionMismatch {
            expected: d,
            found: r.len(),
        });
    }
    if let Some(c) = y.iter().find(|c| **c >= n_classes) {
        return Err(LearnError::Invalid(format!("label {c} >= n_classes {n_classes}")));
    }
    let present = (0..n_classes).filter(|c| y.contains(c)).count();
    if present < 2 {
        return Err(LearnError::Degenerate("training labels contain a single class".into()));
    }
    if params.n_trees == 0 {
        return Err(LearnError::Invalid("n_trees must be positive".into()));
    }
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64]));
            let sample = if params.bootstrap {
                balanced_sample(y, n_classes, n, &mut rng)?
            } else {
                (0..n).collect()
            };
            Ok(train_tree(x, y, n_classes, sample, params, &mut rng))
        })
        .collect::<Result<Vec<_>, LearnError>>()?;
    Ok(Forest {
        trees,
        n_features: d,
        n_classes,
        params: *params,
    })
}
