//! Synthetic ROIs with class-dependent duct morphology.
//!
//! Every ROI starts as normal stroma with desmoplastic patches. Ducts are
//! discs whose rim is epithelium (a per-duct share of it malignant) around a
//! lumen of secretion or background; filled ducts have a malignant core and
//! possibly a necrotic centre. Invasive ROIs also get malignant blobs in
//! desmoplastic stroma outside every duct box. Benign epithelial fragments
//! and blood spots are scattered outside the boxes in every class.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learn::derive_seed;
use crate::raster::{
    write_boxes, write_label_raster, write_manifest, BoundingBox, BoxDocument, Diagnosis, LabelRaster, RasterError,
    RoiRecord, Split, TissueLabel,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("could not place {what} without overlap after {retries} attempts")]
    Placement { what: &'static str, retries: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Inclusive range `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T> Span<T> {
    pub const fn new(min: T, max: T) -> Self {
        Self { min, max }
    }
}

impl Span<usize> {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

impl Span<f64> {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

/// Morphology of one diagnostic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMorphology {
    pub duct_count: Span<usize>,
    /// Outer duct radius in pixels.
    pub radius: Span<f64>,
    /// Epithelial rim thickness in pixels.
    pub thickness: Span<f64>,
    /// Per-duct share of rim pixels labelled ME.
    pub me_fraction: Span<f64>,
    /// Probability that an open lumen holds secretion rather than background.
    pub secretion: f64,
    /// Probability that a duct lumen is filled with ME.
    pub filled: f64,
    /// Probability that a filled duct has a necrotic centre.
    pub necrosis: f64,
    /// Target share of the ROI covered by desmoplastic stroma.
    pub ds_fraction: Span<f64>,
    /// Number of ME blobs scattered outside the duct boxes.
    pub invasive_blobs: Span<usize>,
    /// Probability that a duct is wrapped in desmoplastic stroma up to its box.
    pub periductal_ds: f64,
}

/// Large non-lesional ducts drawn in every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BystanderDucts {
    pub count: Span<usize>,
    pub radius: Span<f64>,
    pub thickness: Span<f64>,
    pub me_fraction: Span<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// ROIs per class, in Benign, Atypia, DCIS, Invasive order.
    pub counts: [usize; 4],
    /// Lesional ducts per class.
    pub morphology: [ClassMorphology; 4],
    pub bystanders: BystanderDucts,
    /// Benign epithelial fragments outside ducts.
    pub fragments: Span<usize>,
    pub fragment_radius: Span<f64>,
    pub blood_spots: Span<usize>,
    /// Background tears outside ducts.
    pub tears: Span<usize>,
    /// Secretion pools outside ducts.
    pub pools: Span<usize>,
    /// Pixels added around each duct's rim bounding box.
    pub box_margin: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let base = ClassMorphology {
            duct_count: Span::new(1, 8),
            radius: Span::new(10.0, 24.0),
            thickness: Span::new(4.0, 8.0),
            me_fraction: Span::new(0.0, 0.15),
            secretion: 0.5,
            filled: 0.0,
            necrosis: 0.0,
            ds_fraction: Span::new(0.0, 0.15),
            invasive_blobs: Span::new(0, 0),
            periductal_ds: 0.05,
        };
        Self {
            width: 512,
            height: 512,
            counts: [100; 4],
            morphology: [
                base.clone(),
                ClassMorphology {
                    me_fraction: Span::new(0.1, 0.5),
                    filled: 0.1,
                    ..base.clone()
                },
                ClassMorphology {
                    me_fraction: Span::new(0.4, 0.9),
                    filled: 0.6,
                    necrosis: 0.5,
                    ds_fraction: Span::new(0.0, 0.25),
                    periductal_ds: 0.15,
                    ..base.clone()
                },
                ClassMorphology {
                    me_fraction: Span::new(0.4, 0.9),
                    filled: 0.6,
                    necrosis: 0.5,
                    ds_fraction: Span::new(0.15, 0.4),
                    invasive_blobs: Span::new(8, 20),
                    periductal_ds: 0.75,
                    ..base
                },
            ],
            bystanders: BystanderDucts {
                count: Span::new(0, 4),
                radius: Span::new(26.0, 44.0),
                thickness: Span::new(6.0, 10.0),
                me_fraction: Span::new(0.0, 0.12),
            },
            fragments: Span::new(10, 120),
            fragment_radius: Span::new(2.0, 10.0),
            blood_spots: Span::new(0, 6),
            tears: Span::new(0, 8),
            pools: Span::new(0, 8),
            box_margin: 2,
            max_retries: 500,
            seed: 0,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SynthError::Config(format!("{name} = {p} is not a probability")))
    }
}

fn check_span<T: PartialOrd + std::fmt::Debug>(name: &str, s: &Span<T>) -> Result<(), SynthError> {
    if s.min <= s.max {
        Ok(())
    } else {
        Err(SynthError::Config(format!("{name} range {:?}..{:?} is empty", s.min, s.max)))
    }
}

impl SynthConfig {
    pub fn morphology_of(&self, class: Diagnosis) -> &ClassMorphology {
        &self.morphology[class.index()]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::Config("raster size must be positive".into()));
        }
        check_span("fragments", &self.fragments)?;
        check_span("fragment_radius", &self.fragment_radius)?;
        check_span("blood_spots", &self.blood_spots)?;
        check_span("tears", &self.tears)?;
        check_span("pools", &self.pools)?;
        let b = &self.bystanders;
        check_span("bystanders.count", &b.count)?;
        check_span("bystanders.radius", &b.radius)?;
        check_span("bystanders.thickness", &b.thickness)?;
        check_span("bystanders.me_fraction", &b.me_fraction)?;
        check_prob("bystanders.me_fraction.min", b.me_fraction.min)?;
        check_prob("bystanders.me_fraction.max", b.me_fraction.max)?;
        if b.thickness.min < 1.0 || b.radius.min < b.thickness.max {
            return Err(SynthError::Config("bystanders: need 1 <= thickness <= radius".into()));
        }
        if self.fragment_radius.min < 0.5 {
            return Err(SynthError::Config("fragment radius must be at least 0.5".into()));
        }
        for (class, m) in Diagnosis::ALL.iter().zip(&self.morphology) {
            let at = |f: &str| format!("{class}.{f}");
            check_span(&at("duct_count"), &m.duct_count)?;
            check_span(&at("radius"), &m.radius)?;
            check_span(&at("thickness"), &m.thickness)?;
            check_span(&at("me_fraction"), &m.me_fraction)?;
            check_span(&at("ds_fraction"), &m.ds_fraction)?;
            check_span(&at("invasive_blobs"), &m.invasive_blobs)?;
            for (f, p) in [
                ("me_fraction.min", m.me_fraction.min),
                ("me_fraction.max", m.me_fraction.max),
                ("secretion", m.secretion),
                ("filled", m.filled),
                ("necrosis", m.necrosis),
                ("periductal_ds", m.periductal_ds),
                ("ds_fraction.min", m.ds_fraction.min),
                ("ds_fraction.max", m.ds_fraction.max),
            ] {
                check_prob(&at(f), p)?;
            }
            if m.thickness.min < 1.0 || m.radius.min < m.thickness.max {
                return Err(SynthError::Config(format!(
                    "{class}: need 1 <= thickness <= radius, got thickness {:?} radius {:?}",
                    m.thickness, m.radius
                )));
            }
            let side = 2.0 * (m.radius.max + self.box_margin as f64 + 1.0);
            if m.duct_count.max > 0 && (side > self.width as f64 || side > self.height as f64) {
                return Err(SynthError::Config(format!("{class}: ducts do not fit the raster")));
            }
        }
        Ok(())
    }
}

/// One generated ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRoi {
    pub raster: LabelRaster,
    pub boxes: Vec<BoundingBox>,
    pub diagnosis: Diagnosis,
}

struct Canvas {
    raster: LabelRaster,
}

impl Canvas {
    /// Pixels whose centre lies within `r` of `(cx, cy)`.
    fn disc(&self, cx: f64, cy: f64, r: f64) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.raster.width() as f64;
        let h = self.raster.height() as f64;
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = (cx + r).ceil().min(w) as usize;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = (cy + r).ceil().min(h) as usize;
        (y0..y1).flat_map(move |y| {
            (x0..x1).filter_map(move |x| {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                (d <= r).then_some((x, y, d))
            })
        })
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, r: f64, label: TissueLabel) -> usize {
        let pixels: Vec<_> = self.disc(cx, cy, r).collect();
        let mut changed = 0;
        for (x, y, _) in pixels {
            if self.raster.get(x, y) != label {
                changed += 1;
            }
            self.raster.set(x, y, label);
        }
        changed
    }
}

struct Duct {
    radius: f64,
    thickness: f64,
    me_fraction: f64,
    filled: bool,
    necrotic: bool,
}

impl Duct {
    fn draw<R: Rng + ?Sized>(&self, canvas: &mut Canvas, cx: f64, cy: f64, lumen: TissueLabel, rng: &mut R) {
        let inner = self.radius - self.thickness.min(self.radius);
        let pixels: Vec<_> = canvas.disc(cx, cy, self.radius).collect();
        for (x, y, d) in pixels {
            let label = if d >= inner {
                if rng.random_bool(self.me_fraction) {
                    TissueLabel::Me
                } else {
                    TissueLabel::Be
                }
            } else if self.filled {
                if self.necrotic && d < 0.5 * inner {
                    TissueLabel::Nc
                } else {
                    TissueLabel::Me
                }
            } else {
                lumen
            };
            canvas.raster.set(x, y, label);
        }
    }
}

fn overlaps_any(b: &BoundingBox, others: &[BoundingBox], gap: usize) -> bool {
    others.iter().any(|o| {
        b.x < o.x_end() + gap && o.x < b.x_end() + gap && b.y < o.y_end() + gap && o.y < b.y_end() + gap
    })
}

/// Bounding box of the disc of radius `r` around `(cx, cy)` grown by `margin`,
/// or `None` if it leaves the raster.
fn disc_box(cx: f64, cy: f64, r: f64, margin: usize, width: usize, height: usize) -> Option<BoundingBox> {
    let m = margin as f64;
    let x0 = (cx - r).floor() - m;
    let y0 = (cy - r).floor() - m;
    let x1 = (cx + r).ceil() + m;
    let y1 = (cy + r).ceil() + m;
    if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
        return None;
    }
    Some(BoundingBox::new(x0 as usize, y0 as usize, (x1 - x0) as usize, (y1 - y0) as usize))
}

fn random_centre<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> (f64, f64) {
    (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64))
}

/// Places a disc outside every box (with a 1 px gap), retrying up to
/// `retries` times. Returns the centre on success.
fn place_outside<R: Rng + ?Sized>(
    rng: &mut R,
    r: f64,
    boxes: &[BoundingBox],
    width: usize,
    height: usize,
    retries: usize,
) -> Option<(f64, f64)> {
    (0..retries).find_map(|_| {
        let (cx, cy) = random_centre(rng, width, height);
        let b = disc_box(cx, cy, r, 0, width, height)?;
        (!overlaps_any(&b, boxes, 1)).then_some((cx, cy))
    })
}

/// Generates one ROI of class `class`.
pub fn generate_roi<R: Rng + ?Sized>(class: Diagnosis, cfg: &SynthConfig, rng: &mut R) -> Result<SynthRoi, SynthError> {
    cfg.validate()?;
    let m = cfg.morphology_of(class);
    let (w, h) = (cfg.width, cfg.height);
    let mut canvas = Canvas {
        raster: LabelRaster::filled(w, h, TissueLabel::Ns)?,
    };

    let ds_target = (m.ds_fraction.sample(rng) * (w * h) as f64) as usize;
    let mut ds_covered = 0;
    let mut attempts = 0;
    while ds_covered < ds_target && attempts < 10_000 {
        attempts += 1;
        let (cx, cy) = random_centre(rng, w, h);
        let r = rng.random_range(10.0..40.0);
        ds_covered += canvas.fill_disc(cx, cy, r, TissueLabel::Ds);
    }

    let n_bystanders = cfg.bystanders.count.sample(rng);
    let n_ducts = m.duct_count.sample(rng);
    let mut boxes = Vec::with_capacity(n_bystanders + n_ducts);
    for i in 0..n_bystanders + n_ducts {
        let duct = if i < n_bystanders {
            let b = &cfg.bystanders;
            Duct {
                radius: b.radius.sample(rng),
                thickness: b.thickness.sample(rng),
                me_fraction: b.me_fraction.sample(rng),
                filled: false,
                necrotic: false,
            }
        } else {
            let filled = rng.random_bool(m.filled);
            Duct {
                radius: m.radius.sample(rng),
                thickness: m.thickness.sample(rng),
                me_fraction: m.me_fraction.sample(rng),
                filled,
                necrotic: filled && rng.random_bool(m.necrosis),
            }
        };
        let lumen = if rng.random_bool(m.secretion) { TissueLabel::Sc } else { TissueLabel::Bg };
        let halo = rng.random_bool(m.periductal_ds);
        let placed = (0..cfg.max_retries).find_map(|_| {
            let (cx, cy) = random_centre(rng, w, h);
            let b = disc_box(cx, cy, duct.radius, cfg.box_margin, w, h)?;
            (!overlaps_any(&b, &boxes, 2)).then_some((cx, cy, b))
        });
        let Some((cx, cy, b)) = placed else {
            return Err(SynthError::Placement {
                what: "duct",
                retries: cfg.max_retries,
            });
        };
        boxes.push(b);
        if halo {
            canvas.fill_disc(cx, cy, duct.radius + cfg.box_margin as f64, TissueLabel::Ds);
        }
        duct.draw(&mut canvas, cx, cy, lumen, rng);
    }

    for _ in 0..cfg.fragments.sample(rng) {
        let r = cfg.fragment_radius.sample(rng);
        if let Some((cx, cy)) = place_outside(rng, r, &boxes, w, h, cfg.max_retries) {
            canvas.fill_disc(cx, cy, r, TissueLabel::Be);
        }
    }
    for (count, radius, label) in [
        (cfg.tears, 5.0..25.0, TissueLabel::Bg),
        (cfg.pools, 3.0..12.0, TissueLabel::Sc),
        (cfg.blood_spots, 2.0..5.0, TissueLabel::Bl),
    ] {
        for _ in 0..count.sample(rng) {
            let r = rng.random_range(radius.clone());
            if let Some((cx, cy)) = place_outside(rng, r, &boxes, w, h, cfg.max_retries) {
                canvas.fill_disc(cx, cy, r, label);
            }
        }
    }
    for _ in 0..m.invasive_blobs.sample(rng) {
        let r = rng.random_range(2.0..5.0);
        let halo = r + 3.0;
        let (cx, cy) = place_outside(rng, halo, &boxes, w, h, cfg.max_retries).ok_or(SynthError::Placement {
            what: "invasive blob",
            retries: cfg.max_retries,
        })?;
        canvas.fill_disc(cx, cy, halo, TissueLabel::Ds);
        canvas.fill_disc(cx, cy, r, TissueLabel::Me);
    }

    Ok(SynthRoi {
        raster: canvas.raster,
        boxes,
        diagnosis: class,
    })
}

/// A `size`×`size` DCIS-like ROI with exactly `n_ducts` lesional ducts and no
/// bystanders, used to time feature extraction.
pub fn benchmark_roi(size: usize, n_ducts: usize, seed: u64) -> Result<SynthRoi, SynthError> {
    let mut cfg = SynthConfig {
        width: size,
        height: size,
        max_retries: 10_000,
        seed,
        ..SynthConfig::default()
    };
    cfg.bystanders.count = Span::new(0, 0);
    let m = &mut cfg.morphology[Diagnosis::Dcis.index()];
    m.duct_count = Span::new(n_ducts, n_ducts);
    m.radius = Span::new(10.0, 20.0);
    generate_roi(Diagnosis::Dcis, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seed of the `index`-th ROI of `class`.
pub fn roi_seed(master: u64, class: Diagnosis, index: usize) -> u64 {
    derive_seed(master, &[class.index() as u64, index as u64])
}

/// Manifest id of the `index`-th ROI of `class`, e.g. `dcis_007`.
pub fn roi_id(class: Diagnosis, index: usize) -> String {
    format!("{}_{index:03}", class.name().to_lowercase())
}

/// Generates all ROIs of `cfg` in memory, in class then index order, with
/// their manifest records (paths relative to the dataset root).
pub fn generate_rois(cfg: &SynthConfig) -> Result<Vec<(RoiRecord, SynthRoi)>, SynthError> {
    cfg.validate()?;
    let jobs: Vec<(Diagnosis, usize)> = Diagnosis::ALL
        .iter()
        .flat_map(|&c| (0..cfg.counts[c.index()]).map(move |i| (c, i)))
        .collect();
    let rois = jobs
        .par_iter()
        .map(|&(c, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(roi_seed(cfg.seed, c, i));
            generate_roi(c, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut splits = Vec::with_capacity(jobs.len());
    for c in Diagnosis::ALL {
        let n = cfg.counts[c.index()];
        let n_train = (0.6 * n as f64).round() as usize;
        let n_val = (0.2 * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[c.index() as u64, u64::MAX])));
        let mut class_splits = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            class_splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        splits.extend(class_splits);
    }

    Ok(jobs
        .into_iter()
        .zip(rois)
        .zip(splits)
        .map(|(((c, i), roi), split)| {
            let id = roi_id(c, i);
            let record = RoiRecord {
                raster: format!("rasters/{id}.pgm"),
                boxes: Some(format!("boxes/{id}.json")),
                diagnosis: Some(c),
                split,
                id,
            };
            (record, roi)
        })
        .collect())
}

/// Writes `rasters/`, `boxes/` and `manifest.json` under `dir` and returns
/// the manifest records.
pub fn generate_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Vec<RoiRecord>, SynthError> {
    let dir = dir.as_ref();
    let rois = generate_rois(cfg)?;
    for sub in ["rasters", "boxes"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| crate::raster::io_err(&p, e))?;
    }
    rois.par_iter().try_for_each(|(rec, roi)| -> Result<(), SynthError> {
        write_label_raster(&roi.raster, dir.join(&rec.raster))?;
        let boxes = rec.boxes.as_deref().expect("synth records carry boxes");
        write_boxes(&BoxDocument::from_boxes(rec.id.clone(), &roi.boxes), dir.join(boxes))?;
        Ok(())
    })?;
    let records: Vec<RoiRecord> = rois.into_iter().map(|(r, _)| r).collect();
    write_manifest(&records, dir.join("manifest.json"))?;
    Ok(records)
}
