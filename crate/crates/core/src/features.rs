//! Tissue histogram and co-occurrence features at three region levels.
//!
//! Every ROI is summarised by a 150-entry [`FeatureVector`]:
//!
//! | block                 | entries | content                                    |
//! |-----------------------|---------|--------------------------------------------|
//! | ROI histogram         | 8       | label frequencies over the whole raster    |
//! | ROI co-occurrence     | 36      | unordered label pairs, no boundary events  |
//! | box histogram         | 8       | mean over ducts, duct bounding box         |
//! | box co-occurrence     | 45      | label pairs plus the `BD` boundary label   |
//! | mask histogram        | 8       | mean over ducts, duct pixel set            |
//! | mask co-occurrence    | 45      | label pairs plus `BD`                      |
//!
//! A co-occurrence *event* is one visit from a region pixel to one of its grid
//! neighbours. Neighbours inside the region record the unordered label pair
//! (so interior pairs are counted once from each end); neighbours outside the
//! region record the pair `{label, BD}` when boundary events are enabled.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instances::{Connectivity, InstanceMap};
use crate::raster::{BoundingBox, Diagnosis, LabelRaster, TissueLabel};

/// Index of the boundary pseudo-label in co-occurrence matrices.
pub const BD: usize = TissueLabel::COUNT;
/// Co-occurrence matrix side: eight tissues plus `BD`.
pub const COOC_LABELS: usize = TissueLabel::COUNT + 1;

pub const HIST_LEN: usize = TissueLabel::COUNT;
pub const ROI_COOC_LEN: usize = TissueLabel::COUNT * (TissueLabel::COUNT + 1) / 2;
pub const DUCT_COOC_LEN: usize = COOC_LABELS * (COOC_LABELS + 1) / 2;
pub const ROI_LEN: usize = HIST_LEN + ROI_COOC_LEN;
pub const DUCT_LEN: usize = HIST_LEN + DUCT_COOC_LEN;
pub const FEATURE_LEN: usize = ROI_LEN + 2 * DUCT_LEN;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("region is empty")]
    EmptyRegion,
    #[error("raster is {0}x{1} but instance map is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("feature table: {0}")]
    Table(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Roi,
    Box,
    Mask,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Roi, Level::Box, Level::Mask];

    /// Suffix used in canonical feature names.
    pub fn tag(self) -> &'static str {
        match self {
            Level::Roi => "ROI",
            Level::Box => "bounding box",
            Level::Mask => "duct mask",
        }
    }

    fn offset(self) -> usize {
        match self {
            Level::Roi => 0,
            Level::Box => ROI_LEN,
            Level::Mask => ROI_LEN + DUCT_LEN,
        }
    }

    fn cooc_labels(self) -> usize {
        match self {
            Level::Roi => TissueLabel::COUNT,
            _ => COOC_LABELS,
        }
    }

    fn len(self) -> usize {
        HIST_LEN + self.cooc_labels() * (self.cooc_labels() + 1) / 2
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "roi" => Ok(Level::Roi),
            "box" => Ok(Level::Box),
            "mask" => Ok(Level::Mask),
            _ => Err(format!("unknown level {s:?} (roi, box, mask)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Histogram,
    Cooccurrence,
}

/// Column range of one block inside the 150-entry vector.
pub fn block_range(level: Level, kind: BlockKind) -> std::ops::Range<usize> {
    let start = level.offset();
    match kind {
        BlockKind::Histogram => start..start + HIST_LEN,
        BlockKind::Cooccurrence => start + HIST_LEN..start + level.len(),
    }
}

/// Sorted column indices covering the requested levels and block kinds.
pub fn select_columns(levels: &[Level], kinds: &[BlockKind]) -> Vec<usize> {
    let mut cols: Vec<usize> = Level::ALL
        .iter()
        .filter(|l| levels.contains(l))
        .flat_map(|&l| {
            [BlockKind::Histogram, BlockKind::Cooccurrence]
                .into_iter()
                .filter(|k| kinds.contains(k))
                .flat_map(move |k| block_range(l, k))
        })
        .collect();
    cols.sort_unstable();
    cols
}

fn cooc_label_name(i: usize) -> &'static str {
    if i == BD {
        "BD"
    } else {
        TissueLabel::ALL[i].abbrev()
    }
}

/// Upper-triangle (with diagonal) index pairs in storage order.
fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |a| (a..n).map(move |b| (a, b)))
}

fn level_names(level: Level, out: &mut Vec<String>) {
    let tag = level.tag();
    for l in TissueLabel::ALL {
        out.push(format!("{l} freq in {tag}"));
    }
    for (a, b) in upper_pairs(level.cooc_labels()) {
        // The boundary label is written first, matching how BD pairs are
        // usually reported ("BD & BE").
        let (first, second) = if b == BD { (b, a) } else { (a, b) };
        out.push(format!("{} & {} in {tag}", cooc_label_name(first), cooc_label_name(second)));
    }
}

static FEATURE_NAMES: LazyLock<Vec<String>> = LazyLock::new(|| {
    let mut names = Vec::with_capacity(FEATURE_LEN);
    for level in Level::ALL {
        level_names(level, &mut names);
    }
    names
});

/// Canonical names of the 150 features, in vector order.
pub fn feature_names() -> &'static [String] {
    &FEATURE_NAMES
}

/// Pixel set a feature is computed over.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    /// The whole raster.
    Roi,
    /// The interior of a box.
    Box(BoundingBox),
    /// The pixels of one instance.
    Mask { instances: &'a InstanceMap, id: u32 },
}

impl Region<'_> {
    /// Window that contains every region pixel.
    fn window(&self, width: usize, height: usize) -> BoundingBox {
        match self {
            Region::Roi => BoundingBox::new(0, 0, width, height),
            Region::Box(b) => clip(*b, width, height),
            Region::Mask { instances, id } => instances
                .instance(*id)
                .map(|i| i.bbox)
                .unwrap_or(BoundingBox::new(0, 0, 0, 0)),
        }
    }
}

fn clip(b: BoundingBox, width: usize, height: usize) -> BoundingBox {
    let x0 = b.x.min(width);
    let y0 = b.y.min(height);
    BoundingBox::new(x0, y0, b.x_end().min(width) - x0, b.y_end().min(height) - y0)
}

/// Dispatches `body` with a monomorphised membership predicate.
fn with_region<R>(
    raster: &LabelRaster,
    region: &Region<'_>,
    body: impl FnOnce(BoundingBox, &dyn Fn(usize, usize) -> bool) -> R,
) -> Result<R, FeatureError> {
    let (w, h) = (raster.width(), raster.height());
    if let Region::Mask { instances, .. } = region {
        if instances.width() != w || instances.height() != h {
            return Err(FeatureError::DimensionMismatch(w, h, instances.width(), instances.height()));
        }
    }
    let win = region.window(w, h);
    if win.area() == 0 {
        return Err(FeatureError::EmptyRegion);
    }
    Ok(match *region {
        Region::Roi | Region::Box(_) => body(win, &|x, y| win.contains(x, y)),
        Region::Mask { instances, id } => body(win, &move |x, y| win.contains(x, y) && instances.id_at(x, y) == id),
    })
}

/// Fraction of region pixels carrying each tissue label.
pub fn histogram_features(raster: &LabelRaster, region: &Region<'_>) -> Result<[f64; HIST_LEN], FeatureError> {
    let counts = with_region(raster, region, |win, inside| {
        let mut counts = [0u64; HIST_LEN];
        for y in win.y..win.y_end() {
            for x in win.x..win.x_end() {
                if inside(x, y) {
                    counts[raster.get(x, y).index()] += 1;
                }
            }
        }
        counts
    })?;
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(FeatureError::EmptyRegion);
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

/// Symmetric 9×9 tally of co-occurrence events over tissue labels plus `BD`.
///
/// Off-diagonal events are stored in both `[a][b]` and `[b][a]`; the
/// diagonal holds same-label events once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceMatrix {
    counts: [[u64; COOC_LABELS]; COOC_LABELS],
}

impl CooccurrenceMatrix {
    fn zero() -> Self {
        Self {
            counts: [[0; COOC_LABELS]; COOC_LABELS],
        }
    }

    #[inline]
    fn record(&mut self, a: usize, b: usize) {
        self.counts[a][b] += 1;
        if a != b {
            self.counts[b][a] += 1;
        }
    }

    pub fn counts(&self) -> &[[u64; COOC_LABELS]; COOC_LABELS] {
        &self.counts
    }

    /// Number of events recorded for the unordered pair {a, b}.
    pub fn get(&self, a: usize, b: usize) -> u64 {
        self.counts[a][b]
    }

    /// Total number of events.
    pub fn total(&self) -> u64 {
        upper_pairs(COOC_LABELS).map(|(a, b)| self.counts[a][b]).sum()
    }

    /// Event frequency of the unordered pair {a, b}; 0 when no events exist.
    pub fn frequency(&self, a: usize, b: usize) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.counts[a][b] as f64 / total as f64
        }
    }

    /// Upper triangle with diagonal over the first `n` labels (8 without
    /// `BD`, 9 with it), normalised to sum to 1 when any event exists.
    pub fn normalized(&self, n: usize) -> Vec<f64> {
        let total = self.total();
        upper_pairs(n)
            .map(|(a, b)| {
                if total == 0 {
                    0.0
                } else {
                    self.counts[a][b] as f64 / total as f64
                }
            })
            .collect()
    }
}

/// Co-occurrence tally with 4-connectivity.
pub fn cooccurrence_features(
    raster: &LabelRaster,
    region: &Region<'_>,
    include_bd: bool,
) -> Result<CooccurrenceMatrix, FeatureError> {
    cooccurrence_features_with(raster, region, include_bd, Connectivity::Four)
}

pub fn cooccurrence_features_with(
    raster: &LabelRaster,
    region: &Region<'_>,
    include_bd: bool,
    connectivity: Connectivity,
) -> Result<CooccurrenceMatrix, FeatureError> {
    let (w, h) = (raster.width() as isize, raster.height() as isize);
    let offsets = connectivity.offsets();
    let (m, any) = with_region(raster, region, |win, inside| {
        let mut m = CooccurrenceMatrix::zero();
        let mut any = false;
        for y in win.y..win.y_end() {
            for x in win.x..win.x_end() {
                if !inside(x, y) {
                    continue;
                }
                any = true;
                let a = raster.get(x, y).index();
                for &(dx, dy) in offsets {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    let in_image = nx >= 0 && ny >= 0 && nx < w && ny < h;
                    if in_image && inside(nx as usize, ny as usize) {
                        m.record(a, raster.get(nx as usize, ny as usize).index());
                    } else if include_bd {
                        m.record(a, BD);
                    }
                }
            }
        }
        (m, any)
    })?;
    if !any {
        return Err(FeatureError::EmptyRegion);
    }
    Ok(m)
}

/// How per-duct vectors are pooled into one ROI-level block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    AreaWeighted,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "area-weighted" | "area_weighted" => Ok(Aggregation::AreaWeighted),
            _ => Err(format!("unknown aggregation {s:?} (mean, area-weighted)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub connectivity: Connectivity,
    pub aggregation: Aggregation,
    /// Append `duct_count` to the model input.
    pub include_duct_count: bool,
}

/// The 44-entry ROI block: histogram plus BD-free co-occurrence.
pub fn roi_features(raster: &LabelRaster) -> Vec<f64> {
    roi_features_with(raster, Connectivity::Four)
}

pub fn roi_features_with(raster: &LabelRaster, connectivity: Connectivity) -> Vec<f64> {
    let mut v = Vec::with_capacity(ROI_LEN);
    v.extend(histogram_features(raster, &Region::Roi).expect("rasters are never empty"));
    let m = cooccurrence_features_with(raster, &Region::Roi, false, connectivity).expect("rasters are never empty");
    v.extend(m.normalized(TissueLabel::COUNT));
    v
}

/// 53-entry feature block of one duct at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuctFeatures {
    pub id: u32,
    pub area: usize,
    pub values: Vec<f64>,
}

/// Per-duct histogram + co-occurrence (with `BD`) over each instance's tight
/// box (`Level::Box`) or pixel set (`Level::Mask`).
pub fn duct_features(
    raster: &LabelRaster,
    instances: &InstanceMap,
    level: Level,
    connectivity: Connectivity,
) -> Result<Vec<DuctFeatures>, FeatureError> {
    if instances.width() != raster.width() || instances.height() != raster.height() {
        return Err(FeatureError::DimensionMismatch(
            raster.width(),
            raster.height(),
            instances.width(),
            instances.height(),
        ));
    }
    instances
        .instances()
        .iter()
        .map(|inst| {
            let region = match level {
                Level::Box => Region::Box(inst.bbox),
                Level::Mask => Region::Mask { instances, id: inst.id },
                Level::Roi => Region::Roi,
            };
            let mut values = Vec::with_capacity(DUCT_LEN);
            values.extend(histogram_features(raster, &region)?);
            values.extend(cooccurrence_features_with(raster, &region, true, connectivity)?.normalized(COOC_LABELS));
            Ok(DuctFeatures {
                id: inst.id,
                area: inst.area,
                values,
            })
        })
        .collect()
}

/// One ROI's feature record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub duct_count: usize,
}

impl FeatureVector {
    pub fn names(&self) -> &'static [String] {
        feature_names()
    }

    /// Classifier input: the 150 values, optionally followed by `duct_count`.
    pub fn model_input(&self, include_duct_count: bool) -> Vec<f64> {
        let mut v = self.values.clone();
        if include_duct_count {
            v.push(self.duct_count as f64);
        }
        v
    }

    pub fn level(&self, level: Level) -> &[f64] {
        &self.values[level.offset()..level.offset() + level.len()]
    }
}

fn pool(ducts: &[DuctFeatures], policy: Aggregation) -> Vec<f64> {
    let mut out = vec![0.0; DUCT_LEN];
    if ducts.is_empty() {
        return out;
    }
    let weights: Vec<f64> = match policy {
        Aggregation::Mean => vec![1.0; ducts.len()],
        Aggregation::AreaWeighted => ducts.iter().map(|d| d.area as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    for (d, w) in ducts.iter().zip(&weights) {
        for (o, v) in out.iter_mut().zip(&d.values) {
            *o += w * v;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Concatenates the ROI block with the pooled box and mask blocks. With no
/// ducts both duct blocks are zero.
pub fn aggregate_features(
    roi: &[f64],
    per_duct_box: &[DuctFeatures],
    per_duct_mask: &[DuctFeatures],
    policy: Aggregation,
) -> FeatureVector {
    assert_eq!(roi.len(), ROI_LEN, "ROI block has {} entries", roi.len());
    let mut values = Vec::with_capacity(FEATURE_LEN);
    values.extend_from_slice(roi);
    values.extend(pool(per_duct_box, policy));
    values.extend(pool(per_duct_mask, policy));
    FeatureVector {
        values,
        duct_count: per_duct_mask.len().max(per_duct_box.len()),
    }
}

/// Full three-level extraction for one ROI.
pub fn extract_features(
    raster: &LabelRaster,
    instances: &InstanceMap,
    config: &FeatureConfig,
) -> Result<FeatureVector, FeatureError> {
    let roi = roi_features_with(raster, config.connectivity);
    let boxes = duct_features(raster, instances, Level::Box, config.connectivity)?;
    let masks = duct_features(raster, instances, Level::Mask, config.connectivity)?;
    Ok(aggregate_features(&roi, &boxes, &masks, config.aggregation))
}

// ---------------------------------------------------------------------------
// Feature table

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub roi_id: String,
    pub diagnosis: Option<Diagnosis>,
    pub features: FeatureVector,
}

/// Delimited feature table: `roi_id,diagnosis,duct_count,<150 names>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn header() -> Vec<String> {
        let mut h = vec!["roi_id".to_string(), "diagnosis".into(), "duct_count".into()];
        h.extend(feature_names().iter().cloned());
        h
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, FeatureError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::header())?;
        for row in &self.rows {
            let mut rec = vec![
                row.roi_id.clone(),
                row.diagnosis.map(|d| d.name().to_string()).unwrap_or_default(),
                row.features.duct_count.to_string(),
            ];
            // `Display` for f64 prints the shortest string that parses back
            // to the same value.
            rec.extend(row.features.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| FeatureError::Table(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut r = csv::Reader::from_reader(bytes);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != Self::header() {
            return Err(FeatureError::Table("header does not match the canonical feature names".into()));
        }
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| FeatureError::Table(format!("row {}: bad {what}", line + 1));
            let diagnosis = match &rec[1] {
                "" => None,
                s => Some(s.parse::<Diagnosis>().map_err(|_| bad("diagnosis"))?),
            };
            let duct_count = rec[2].parse().map_err(|_| bad("duct_count"))?;
            let values = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f64>().map_err(|_| bad("value")))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(FeatureRow {
                roi_id: rec[0].to_string(),
                diagnosis,
                features: FeatureVector { values, duct_count },
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&bytes)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}
