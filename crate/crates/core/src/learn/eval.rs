//! Evaluation protocols: leave-one-out binary tasks and the split-based
//! four-way task, each repeated over derived seeds.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::{argmax, train_forest, Classifier, Forest, ForestParams, Prediction};
use super::metrics::{compute_metrics, ConfusionMatrix, MeanStd};
use super::pca::{pca_fit, PcaModel};
use super::sampling::derive_seed;
use super::LearnError;
use crate::features::FeatureTable;
use crate::raster::{self, Diagnosis, RoiRecord, Split};

/// Binary task: positive classes against negative classes; ROIs with any
/// other diagnosis are excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub positive: Vec<Diagnosis>,
    pub negative: Vec<Diagnosis>,
}

impl TaskSpec {
    pub fn new(name: &str, positive: &[Diagnosis], negative: &[Diagnosis]) -> Result<Self, LearnError> {
        if positive.iter().any(|p| negative.contains(p)) {
            return Err(LearnError::Invalid(format!("task {name}: positive and negative classes overlap")));
        }
        if positive.is_empty() || negative.is_empty() {
            return Err(LearnError::Invalid(format!("task {name}: both sides need a class")));
        }
        Ok(Self {
            name: name.into(),
            positive: positive.to_vec(),
            negative: negative.to_vec(),
        })
    }

    pub fn invasive_vs_noninvasive() -> Self {
        use Diagnosis::*;
        Self::new("invasive-vs-noninvasive", &[Invasive], &[Benign, Atypia, Dcis]).expect("disjoint")
    }

    pub fn atypia_dcis_vs_benign() -> Self {
        use Diagnosis::*;
        Self::new("atypia-dcis-vs-benign", &[Atypia, Dcis], &[Benign]).expect("disjoint")
    }

    pub fn dcis_vs_atypia() -> Self {
        use Diagnosis::*;
        Self::new("dcis-vs-atypia", &[Dcis], &[Atypia]).expect("disjoint")
    }

    pub fn standard() -> [TaskSpec; 3] {
        [
            Self::invasive_vs_noninvasive(),
            Self::atypia_dcis_vs_benign(),
            Self::dcis_vs_atypia(),
        ]
    }

    /// 1 for positive, 0 for negative, `None` when excluded.
    pub fn class_of(&self, d: Diagnosis) -> Option<usize> {
        if self.positive.contains(&d) {
            Some(1)
        } else if self.negative.contains(&d) {
            Some(0)
        } else {
            None
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        let join = |ds: &[Diagnosis]| ds.iter().map(|d| d.name()).collect::<Vec<_>>().join("+");
        vec![join(&self.negative), join(&self.positive)]
    }
}

/// Either one of the binary tasks or the four-way split evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Task {
    Binary(TaskSpec),
    FourWay,
}

impl Task {
    pub fn name(&self) -> &str {
        match self {
            Task::Binary(t) => &t.name,
            Task::FourWay => "fourway",
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self {
            Task::Binary(t) => t.class_names(),
            Task::FourWay => Diagnosis::ALL.iter().map(|d| d.name().to_string()).collect(),
        }
    }

    pub fn class_of(&self, d: Diagnosis) -> Option<usize> {
        match self {
            Task::Binary(t) => t.class_of(d),
            Task::FourWay => Some(d.index()),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "fourway" {
            return Ok(Task::FourWay);
        }
        TaskSpec::standard()
            .into_iter()
            .find(|t| t.name == s)
            .map(Task::Binary)
            .ok_or_else(|| {
                format!("unknown task {s:?} (invasive-vs-noninvasive, atypia-dcis-vs-benign, dcis-vs-atypia, fourway)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub diagnosis: Option<Diagnosis>,
    pub split: Split,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Joins a feature table with manifest split assignments (by ROI id).
    pub fn from_table(table: &FeatureTable, manifest: Option<&[RoiRecord]>, include_duct_count: bool) -> Self {
        let splits: HashMap<&str, Split> = manifest
            .unwrap_or_default()
            .iter()
            .map(|r| (r.id.as_str(), r.split))
            .collect();
        let mut feature_names = FeatureTable::header()[3..].to_vec();
        if include_duct_count {
            feature_names.push("duct_count".into());
        }
        let samples = table
            .rows
            .iter()
            .map(|row| Sample {
                id: row.roi_id.clone(),
                diagnosis: row.diagnosis,
                split: splits.get(row.roi_id.as_str()).copied().unwrap_or_default(),
                features: row.features.model_input(include_duct_count),
            })
            .collect();
        Self { feature_names, samples }
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Self {
        Self {
            feature_names: columns.iter().map(|&c| self.feature_names[c].clone()).collect(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    features: columns.iter().map(|&c| s.features[c]).collect(),
                    ..s.clone()
                })
                .collect(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub forest: ForestParams,
    /// Reduce with PCA whenever the feature count exceeds the training-set
    /// size.
    pub pca_when_wide: bool,
    pub pca_k: usize,
    /// Candidate forest sizes chosen on the validation split (four-way only);
    /// empty disables selection.
    pub forest_size_candidates: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            forest: ForestParams::default(),
            pca_when_wide: true,
            pca_k: 20,
            forest_size_candidates: Vec::new(),
        }
    }
}

/// Optional PCA followed by a forest; the unit every protocol fits per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub pca: Option<PcaModel>,
    pub forest: Forest,
    n_features: usize,
}

impl FittedModel {
    /// PCA is fitted on `x` (training rows only) when `d > n`, with
    /// `k = min(pca_k, n)`.
    pub fn fit(
        x: &[Vec<f64>],
        y: &[usize],
        n_classes: usize,
        config: &EvalConfig,
        seed: u64,
    ) -> Result<Self, LearnError> {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        let pca = if config.pca_when_wide && d > n && n >= 2 {
            Some(pca_fit(x, config.pca_k.min(n).min(d).max(1))?)
        } else {
            None
        };
        let forest = match &pca {
            Some(p) => train_forest(&p.transform(x)?, y, n_classes, &config.forest, seed)?,
            None => train_forest(x, y, n_classes, &config.forest, seed)?,
        };
        Ok(Self {
            pca,
            forest,
            n_features: d,
        })
    }
}

impl Classifier for FittedModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn n_classes(&self) -> usize {
        self.forest.n_classes()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        if x.len() != self.n_features {
            return Err(LearnError::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        match &self.pca {
            Some(p) => self.forest.predict_proba(&p.transform_row(x)?),
            None => self.forest.predict_proba(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub repeat: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_trees: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub protocol: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_class: Option<String>,
    pub seed: u64,
    pub n_rois: usize,
    pub n_features: usize,
    pub pca_applied: bool,
    pub runs: Vec<RunResult>,
    pub summary: BTreeMap<String, MeanStd>,
}

impl EvalReport {
    pub fn mean(&self, metric: &str) -> f64 {
        self.summary.get(metric).map_or(f64::NAN, |m| m.mean)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    fn summarize(runs: &[RunResult]) -> BTreeMap<String, MeanStd> {
        let mut keys: Vec<&String> = runs.iter().flat_map(|r| r.metrics.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|k| {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(k).copied()).collect();
                (k.clone(), MeanStd::of(&vals))
            })
            .collect()
    }
}

fn task_rows<'a>(dataset: &'a Dataset, task: &TaskSpec) -> Result<(Vec<&'a Sample>, Vec<usize>), LearnError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in &dataset.samples {
        let Some(d) = s.diagnosis else { continue };
        if let Some(c) = task.class_of(d) {
            rows.push(s);
            labels.push(c);
        }
    }
    if rows.len() < 2 {
        return Err(LearnError::Degenerate(format!(
            "task {} selects {} ROIs; at least 2 are required",
            task.name,
            rows.len()
        )));
    }
    for c in 0..2 {
        let k = labels.iter().filter(|l| **l == c).count();
        if k < 2 {
            return Err(LearnError::Degenerate(format!(
                "task {} has {k} ROIs of class {}; leave-one-out needs at least 2 per class",
                task.name,
                task.class_names()[c]
            )));
        }
    }
    Ok((rows, labels))
}

/// Leave-one-out evaluation of a binary task, repeated `repeats` times.
/// Fold `i` of repeat `r` trains with seed `derive(seed, [r, i])`; PCA and
/// balanced sampling are refitted inside every fold.
pub fn run_loocv(
    dataset: &Dataset,
    task: &TaskSpec,
    config: &EvalConfig,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport, LearnError> {
    let (rows, labels) = task_rows(dataset, task)?;
    let n = rows.len();
    let mut runs = Vec::with_capacity(repeats);
    let pca_applied = config.pca_when_wide && dataset.n_features() > n - 1;
    for r in 0..repeats {
        let preds = (0..n)
            .into_par_iter()
            .map(|held| {
                let (x, y): (Vec<Vec<f64>>, Vec<usize>) = (0..n)
                    .filter(|&i| i != held)
                    .map(|i| (rows[i].features.clone(), labels[i]))
                    .unzip();
                let model = FittedModel::fit(&x, &y, 2, config, derive_seed(seed, &[r as u64, held as u64]))?;
                Ok(model.predict(&rows[held].features)?.class)
            })
            .collect::<Result<Vec<usize>, LearnError>>()?;
        let confusion = ConfusionMatrix::from_pairs(2, labels.iter().copied().zip(preds));
        let m = compute_metrics(&confusion, 1)?;
        let metrics = BTreeMap::from([
            ("accuracy".to_string(), m.accuracy),
            ("f1".to_string(), m.f1),
            ("sensitivity".to_string(), m.sensitivity),
            ("specificity".to_string(), m.specificity),
        ]);
        runs.push(RunResult {
            repeat: r,
            confusion,
            metrics,
            degenerate: m.degenerate,
            n_trees: None,
        });
    }
    Ok(EvalReport {
        task: task.name.clone(),
        protocol: "leave-one-out".into(),
        classes: task.class_names(),
        positive_class: Some(task.class_names()[1].clone()),
        seed,
        n_rois: n,
        n_features: dataset.n_features(),
        pca_applied,
        summary: EvalReport::summarize(&runs),
        runs,
    })
}

fn split_rows(dataset: &Dataset, split: Split) -> (Vec<Vec<f64>>, Vec<usize>) {
    dataset
        .samples
        .iter()
        .filter(|s| s.split == split)
        .filter_map(|s| s.diagnosis.map(|d| (s.features.clone(), d.index())))
        .unzip()
}

fn accuracy_of(model: &impl Classifier, x: &[Vec<f64>], y: &[usize]) -> Result<f64, LearnError> {
    let mut hits = 0;
    for (row, c) in x.iter().zip(y) {
        if model.predict(row)?.class == *c {
            hits += 1;
        }
    }
    Ok(hits as f64 / x.len().max(1) as f64)
}

/// Four-way evaluation on the manifest's train/test split, repeated with
/// seeds `derive(seed, [r])`. The validation split is only used to pick a
/// forest size when `config.forest_size_candidates` is non-empty.
pub fn run_split_eval(
    dataset: &Dataset,
    config: &EvalConfig,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport, LearnError> {
    let (train_x, train_y) = split_rows(dataset, Split::Train);
    let (test_x, test_y) = split_rows(dataset, Split::Test);
    let (val_x, val_y) = split_rows(dataset, Split::Val);
    if train_x.is_empty() || test_x.is_empty() {
        return Err(LearnError::MissingSplit(format!(
            "{} labelled train and {} labelled test ROIs",
            train_x.len(),
            test_x.len()
        )));
    }
    let n_classes = Diagnosis::ALL.len();
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let run_seed = derive_seed(seed, &[r as u64]);
        let mut cfg = config.clone();
        let mut chosen = None;
        if !config.forest_size_candidates.is_empty() && !val_x.is_empty() {
            let mut best = (f64::NEG_INFINITY, 0);
            for &size in &config.forest_size_candidates {
                cfg.forest.n_trees = size;
                let m = FittedModel::fit(&train_x, &train_y, n_classes, &cfg, run_seed)?;
                let acc = accuracy_of(&m, &val_x, &val_y)?;
                if acc > best.0 {
                    best = (acc, size);
                }
            }
            cfg.forest.n_trees = best.1;
            chosen = Some(best.1);
        }
        let model = FittedModel::fit(&train_x, &train_y, n_classes, &cfg, run_seed)?;
        let mut confusion = ConfusionMatrix::new(n_classes);
        for (row, &c) in test_x.iter().zip(&test_y) {
            confusion.add(c, model.predict(row)?.class);
        }
        let metrics = BTreeMap::from([("accuracy".to_string(), confusion.accuracy())]);
        runs.push(RunResult {
            repeat: r,
            confusion,
            metrics,
            degenerate: Vec::new(),
            n_trees: chosen,
        });
    }
    Ok(EvalReport {
        task: "fourway".into(),
        protocol: "train-test split".into(),
        classes: Task::FourWay.class_names(),
        positive_class: None,
        seed,
        n_rois: train_x.len() + test_x.len() + val_x.len(),
        n_features: dataset.n_features(),
        pca_applied: config.pca_when_wide && dataset.n_features() > train_x.len(),
        summary: EvalReport::summarize(&runs),
        runs,
    })
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Persisted model: the fitted PCA/forest plus the feature names it was
/// trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub task: String,
    pub classes: Vec<String>,
    pub feature_names: Vec<String>,
    pub model: FittedModel,
}

impl ModelFile {
    /// Trains on every labelled ROI of a binary task, or on the train split
    /// for the four-way task.
    pub fn train(dataset: &Dataset, task: &Task, config: &EvalConfig, seed: u64) -> Result<Self, LearnError> {
        let (x, y): (Vec<Vec<f64>>, Vec<usize>) = match task {
            Task::Binary(spec) => {
                let (rows, labels) = task_rows(dataset, spec)?;
                (rows.iter().map(|s| s.features.clone()).collect(), labels)
            }
            Task::FourWay => split_rows(dataset, Split::Train),
        };
        if x.is_empty() {
            return Err(LearnError::MissingSplit("no training ROIs".into()));
        }
        let n_classes = task.class_names().len();
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            task: task.name().to_string(),
            classes: task.class_names(),
            feature_names: dataset.feature_names.clone(),
            model: FittedModel::fit(&x, &y, n_classes, config, seed)?,
        })
    }

    /// Predicts a row after checking that its feature names match the ones
    /// used in training.
    pub fn predict(&self, names: &[String], x: &[f64]) -> Result<Prediction, LearnError> {
        if names != self.feature_names.as_slice() {
            return Err(LearnError::NameMismatch);
        }
        self.model.predict(x)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), LearnError> {
        Ok(raster::write_json(self, path.as_ref())?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, LearnError> {
        let m: Self = raster::read_json(path.as_ref())?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(LearnError::Invalid(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn class_name(&self, p: &Prediction) -> &str {
        &self.classes[argmax(&p.probabilities)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(id: usize, d: Diagnosis, split: Split, features: Vec<f64>) -> Sample {
        Sample {
            id: format!("roi-{id}"),
            diagnosis: Some(d),
            split,
            features,
        }
    }

    fn small_config(n_trees: usize) -> EvalConfig {
        EvalConfig {
            forest: ForestParams {
                n_trees,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn task_parsing_and_membership() {
        let t: Task = "atypia-dcis-vs-benign".parse().unwrap();
        let Task::Binary(spec) = &t else { panic!() };
        assert_eq!(spec.class_of(Diagnosis::Dcis), Some(1));
        assert_eq!(spec.class_of(Diagnosis::Benign), Some(0));
        assert_eq!(spec.class_of(Diagnosis::Invasive), None);
        assert_eq!("fourway".parse::<Task>().unwrap(), Task::FourWay);
        assert!("nope".parse::<Task>().is_err());
        assert!(TaskSpec::new("x", &[Diagnosis::Dcis], &[Diagnosis::Dcis]).is_err());
    }

    #[test]
    fn informative_feature_gives_perfect_loocv() {
        use Diagnosis::*;
        let ds = Dataset {
            feature_names: vec!["label".into()],
            samples: vec![
                sample(0, Atypia, Split::Train, vec![0.0]),
                sample(1, Atypia, Split::Train, vec![0.0]),
                sample(2, Dcis, Split::Train, vec![1.0]),
                sample(3, Dcis, Split::Train, vec![1.0]),
            ],
        };
        let r = run_loocv(&ds, &TaskSpec::dcis_vs_atypia(), &small_config(10), 3, 1).unwrap();
        for run in &r.runs {
            for v in run.metrics.values() {
                assert_eq!(*v, 1.0);
            }
        }
        assert_eq!(r.summary["accuracy"].std, 0.0);
    }

    #[test]
    fn loocv_rejects_degenerate_tasks() {
        use Diagnosis::*;
        let ds = Dataset {
            feature_names: vec!["f".into()],
            samples: vec![sample(0, Benign, Split::Train, vec![0.0]), sample(1, Benign, Split::Train, vec![1.0])],
        };
        assert!(run_loocv(&ds, &TaskSpec::dcis_vs_atypia(), &small_config(5), 1, 0).is_err());
        assert!(run_loocv(&ds, &TaskSpec::atypia_dcis_vs_benign(), &small_config(5), 1, 0).is_err());
    }

    #[test]
    fn loocv_is_deterministic_and_pca_triggers_when_wide() {
        use Diagnosis::*;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Sample> = (0..12)
            .map(|i| {
                let d = if i % 2 == 0 { Atypia } else { Dcis };
                let f = (0..30).map(|j| rng.random::<f64>() + if j == 0 { i as f64 % 2.0 } else { 0.0 }).collect();
                sample(i, d, Split::Train, f)
            })
            .collect();
        let ds = Dataset {
            feature_names: (0..30).map(|j| format!("f{j}")).collect(),
            samples,
        };
        let cfg = small_config(8);
        let a = run_loocv(&ds, &TaskSpec::dcis_vs_atypia(), &cfg, 2, 7).unwrap();
        let b = run_loocv(&ds, &TaskSpec::dcis_vs_atypia(), &cfg, 2, 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.pca_applied);

        let x: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.features.clone()).collect();
        let y: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let wide = FittedModel::fit(&x, &y, 2, &cfg, 0).unwrap();
        assert_eq!(wide.pca.as_ref().unwrap().k(), 12);
        let narrow = FittedModel::fit(&x.iter().map(|r| r[..5].to_vec()).collect::<Vec<_>>(), &y, 2, &cfg, 0).unwrap();
        assert!(narrow.pca.is_none());
    }

    #[test]
    fn split_eval_memorises_separable_data() {
        let mut samples = Vec::new();
        for (k, d) in Diagnosis::ALL.iter().enumerate() {
            for i in 0..6 {
                let f = vec![k as f64 + 0.01 * i as f64, (k * k) as f64];
                samples.push(sample(k * 10 + i, *d, Split::Train, f.clone()));
                samples.push(sample(k * 10 + i + 100, *d, Split::Test, f));
            }
        }
        let ds = Dataset {
            feature_names: vec!["a".into(), "b".into()],
            samples,
        };
        let r = run_split_eval(&ds, &small_config(10), 3, 2).unwrap();
        assert_eq!(r.mean("accuracy"), 1.0);
        assert!(r.summary["accuracy"].std >= 0.0);

        let mut no_test = ds.clone();
        no_test.samples.retain(|s| s.split == Split::Train);
        assert!(matches!(run_split_eval(&no_test, &small_config(3), 1, 0), Err(LearnError::MissingSplit(_))));
    }

    #[test]
    fn model_file_refuses_renamed_features() {
        use Diagnosis::*;
        let ds = Dataset {
            feature_names: vec!["x".into()],
            samples: (0..6)
                .map(|i| sample(i, if i < 3 { Atypia } else { Dcis }, Split::Train, vec![i as f64]))
                .collect(),
        };
        let m = ModelFile::train(&ds, &Task::Binary(TaskSpec::dcis_vs_atypia()), &small_config(5), 3).unwrap();
        assert!(m.predict(&["x".into()], &[5.0]).is_ok());
        assert!(matches!(m.predict(&["y".into()], &[5.0]), Err(LearnError::NameMismatch)));
    }
}
