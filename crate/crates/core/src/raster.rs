//! Tissue-label rasters, binary masks, bounding boxes and the on-disk formats
//! that carry them between pipeline stages.
//!
//! Label rasters are binary PGM (`P5`, maxval 255) files whose sample values
//! are tissue codes 0..=7. Instance rasters reuse the same container with
//! 16-bit big-endian samples (see [`crate::instances`]). Box annotations and
//! dataset manifests are JSON documents.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while reading or writing rasters and annotation documents.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed PGM: {0}")]
    Format(String),
    #[error("pixel {offset} has value {value}, outside the tissue label range 0..=7")]
    LabelRange { offset: usize, value: u16 },
    #[error("malformed JSON document {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid raster: {0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &Path, source: io::Error) -> RasterError {
    RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One of the eight tissue classes produced by the semantic segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
#[repr(u8)]
pub enum TissueLabel {
    /// Background.
    Bg = 0,
    /// Benign epithelium.
    Be = 1,
    /// Malignant epithelium.
    Me = 2,
    /// Normal stroma.
    Ns = 3,
    /// Desmoplastic stroma.
    Ds = 4,
    /// Secretion.
    Sc = 5,
    /// Blood.
    Bl = 6,
    /// Necrosis.
    Nc = 7,
}

impl TissueLabel {
    pub const COUNT: usize = 8;

    pub const ALL: [TissueLabel; 8] = [
        TissueLabel::Bg,
        TissueLabel::Be,
        TissueLabel::Me,
        TissueLabel::Ns,
        TissueLabel::Ds,
        TissueLabel::Sc,
        TissueLabel::Bl,
        TissueLabel::Nc,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            TissueLabel::Bg => "BG",
            TissueLabel::Be => "BE",
            TissueLabel::Me => "ME",
            TissueLabel::Ns => "NS",
            TissueLabel::Ds => "DS",
            TissueLabel::Sc => "SC",
            TissueLabel::Bl => "BL",
            TissueLabel::Nc => "NC",
        }
    }
}

impl fmt::Display for TissueLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for TissueLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.abbrev().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown tissue label {s:?}"))
    }
}

/// Tissues that surround ducts; the default foreground for binarization.
pub const DEFAULT_FOREGROUND: [TissueLabel; 4] = [
    TissueLabel::Be,
    TissueLabel::Me,
    TissueLabel::Sc,
    TissueLabel::Nc,
];

/// A set of tissue labels, stored as a bit set over the label codes.
/// Serialized as a list of abbreviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<TissueLabel>", into = "Vec<TissueLabel>")]
pub struct LabelSet(u8);

impl From<Vec<TissueLabel>> for LabelSet {
    fn from(v: Vec<TissueLabel>) -> Self {
        LabelSet::new(&v)
    }
}

impl From<LabelSet> for Vec<TissueLabel> {
    fn from(s: LabelSet) -> Self {
        s.labels().collect()
    }
}

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);
    pub const ALL: LabelSet = LabelSet(0xff);

    pub fn new(labels: &[TissueLabel]) -> Self {
        LabelSet(labels.iter().fold(0, |acc, l| acc | (1 << l.code())))
    }

    #[inline]
    pub fn contains(self, label: TissueLabel) -> bool {
        self.0 & (1 << label.code()) != 0
    }

    pub fn labels(self) -> impl Iterator<Item = TissueLabel> {
        TissueLabel::ALL.into_iter().filter(move |l| self.contains(*l))
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet::new(&DEFAULT_FOREGROUND)
    }
}

/// Row-major grid of tissue labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    width: usize,
    height: usize,
    labels: Vec<TissueLabel>,
}

impl LabelRaster {
    pub fn new(width: usize, height: usize, labels: Vec<TissueLabel>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        if labels.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "{} labels supplied for a {width}x{height} raster",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: TissueLabel) -> Result<Self, RasterError> {
        Self::new(width, height, vec![label; width * height])
    }

    /// Builds a raster from raw codes, rejecting any code above 7.
    pub fn from_codes(width: usize, height: usize, codes: &[u8]) -> Result<Self, RasterError> {
        let labels = codes
            .iter()
            .enumerate()
            .map(|(offset, &c)| {
                TissueLabel::from_code(c).ok_or(RasterError::LabelRange {
                    offset,
                    value: c as u16,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(width, height, labels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn labels(&self) -> &[TissueLabel] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> TissueLabel {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: TissueLabel) {
        self.labels[y * self.width + x] = label;
    }

    pub fn codes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    /// Labels present anywhere in the raster.
    pub fn label_set(&self) -> LabelSet {
        let mut bits = 0u8;
        for l in &self.labels {
            bits |= 1 << l.code();
        }
        LabelSet(bits)
    }
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, RasterError> {
        if bits.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "{} bits supplied for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Axis-aligned box in pixel coordinates; `x`/`y` are the inclusive
/// top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    /// Clips a possibly out-of-range box to `width`×`height`. Returns `None`
    /// when nothing of the box remains.
    pub fn clamped(x: i64, y: i64, w: i64, h: i64, width: usize, height: usize) -> Option<Self> {
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = x.saturating_add(w).min(width as i64);
        let y1 = y.saturating_add(h).min(height as i64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(Self::new(
            x0 as usize,
            y0 as usize,
            (x1 - x0) as usize,
            (y1 - y0) as usize,
        ))
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Exclusive right edge.
    #[inline]
    pub fn x_end(&self) -> usize {
        self.x + self.w
    }

    /// Exclusive bottom edge.
    #[inline]
    pub fn y_end(&self) -> usize {
        self.y + self.h
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x_end() && y >= self.y && y < self.y_end()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x_end() <= width && self.y_end() <= height
    }
}

/// Final diagnostic category of an ROI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    Benign,
    Atypia,
    #[serde(rename = "DCIS")]
    Dcis,
    Invasive,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 4] = [
        Diagnosis::Benign,
        Diagnosis::Atypia,
        Diagnosis::Dcis,
        Diagnosis::Invasive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Diagnosis::Benign => "Benign",
            Diagnosis::Atypia => "Atypia",
            Diagnosis::Dcis => "DCIS",
            Diagnosis::Invasive => "Invasive",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Diagnosis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown diagnosis {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

/// One ROI entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub id: String,
    pub raster: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<String>,
    #[serde(default)]
    pub diagnosis: Option<Diagnosis>,
    #[serde(default)]
    pub split: Split,
}

// ---------------------------------------------------------------------------
// PGM container

pub(crate) struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], RasterError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(RasterError::Format("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, RasterError> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| RasterError::Format(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

pub(crate) fn decode_pgm(bytes: &[u8]) -> Result<PgmImage, RasterError> {
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(RasterError::Format("missing P5 magic".into()));
    }
    pos += 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(RasterError::Format(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(RasterError::Format(format!("maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(RasterError::Format("missing whitespace after maxval".into()));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| RasterError::Format("dimensions overflow".into()))?;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(RasterError::Format(format!(
            "expected {need} sample bytes, found {}",
            data.len()
        )));
    }
    let samples = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        data[..n].iter().map(|&b| b as u16).collect()
    };
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub(crate) fn encode_pgm(width: usize, height: usize, maxval: u16, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval > 255 {
        out.reserve(samples.len() * 2);
        for s in samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(samples.iter().map(|&s| s as u8));
    }
    out
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RasterError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

pub fn decode_label_raster(bytes: &[u8]) -> Result<LabelRaster, RasterError> {
    let img = decode_pgm(bytes)?;
    if img.maxval > 255 {
        return Err(RasterError::Format(format!(
            "label rasters use 8-bit samples, found maxval {}",
            img.maxval
        )));
    }
    let labels = img
        .samples
        .iter()
        .enumerate()
        .map(|(offset, &v)| {
            u8::try_from(v)
                .ok()
                .and_then(TissueLabel::from_code)
                .ok_or(RasterError::LabelRange { offset, value: v })
        })
        .collect::<Result<Vec<_>, _>>()?;
    LabelRaster::new(img.width, img.height, labels)
}

pub fn encode_label_raster(raster: &LabelRaster) -> Vec<u8> {
    let samples: Vec<u16> = raster.labels.iter().map(|l| l.code() as u16).collect();
    encode_pgm(raster.width, raster.height, 255, &samples)
}

pub fn read_label_raster(path: impl AsRef<Path>) -> Result<LabelRaster, RasterError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_label_raster(&bytes)
}

pub fn write_label_raster(raster: &LabelRaster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    write_bytes(path.as_ref(), &encode_label_raster(raster))
}

// ---------------------------------------------------------------------------
// JSON documents

/// Box annotation entry as stored on disk; coordinates may overhang the
/// raster and are clamped by [`BoxDocument::clamped_boxes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxEntry {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<BoundingBox> for BoxEntry {
    fn from(b: BoundingBox) -> Self {
        BoxEntry {
            x: b.x as i64,
            y: b.y as i64,
            w: b.w as i64,
            h: b.h as i64,
        }
    }
}

/// Per-ROI box annotation document: `{"image": id, "boxes": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDocument {
    pub image: String,
    pub boxes: Vec<BoxEntry>,
}

impl BoxDocument {
    pub fn from_boxes(image: impl Into<String>, boxes: &[BoundingBox]) -> Self {
        BoxDocument {
            image: image.into(),
            boxes: boxes.iter().copied().map(BoxEntry::from).collect(),
        }
    }

    /// Clamps every entry into a `width`×`height` raster. Entries that stick
    /// out are logged; entries left empty are dropped.
    pub fn clamped_boxes(&self, width: usize, height: usize) -> Vec<BoundingBox> {
        let mut out = Vec::with_capacity(self.boxes.len());
        for (i, e) in self.boxes.iter().enumerate() {
            match BoundingBox::clamped(e.x, e.y, e.w, e.h, width, height) {
                Some(b) => {
                    if b.x as i64 != e.x || b.y as i64 != e.y || b.w as i64 != e.w || b.h as i64 != e.h {
                        log::warn!("{}: box {i} {e:?} clamped to {b:?}", self.image);
                    }
                    out.push(b);
                }
                None => log::warn!("{}: box {i} {e:?} lies outside the raster, dropped", self.image),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("box document serializes");
        s.push('\n');
        s
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RasterError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| RasterError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), RasterError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| RasterError::Json {
        path: path.display().to_string(),
        source,
    })?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<BoxDocument, RasterError> {
    read_json(path.as_ref())
}

pub fn write_boxes(doc: &BoxDocument, path: impl AsRef<Path>) -> Result<(), RasterError> {
    write_bytes(path.as_ref(), doc.to_json().as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<RoiRecord>, RasterError> {
    read_json(path.as_ref())
}

pub fn write_manifest(records: &[RoiRecord], path: impl AsRef<Path>) -> Result<(), RasterError> {
    write_json(&records, path.as_ref())
}

// ---------------------------------------------------------------------------
// Raster operations

/// Marks every pixel whose label is in `foreground`.
pub fn binarize(raster: &LabelRaster, foreground: LabelSet) -> BitMask {
    BitMask {
        width: raster.width,
        height: raster.height,
        bits: raster.labels.iter().map(|l| foreground.contains(*l)).collect(),
    }
}

/// Nearest-neighbour resize sampling each output pixel centre:
/// `out(i, j) = in(floor((i + 0.5) * H / out_h), floor((j + 0.5) * W / out_w))`.
pub fn resize_nearest(raster: &LabelRaster, out_w: usize, out_h: usize) -> Result<LabelRaster, RasterError> {
    if out_w == 0 || out_h == 0 {
        return Err(RasterError::Invalid(format!(
            "target size must be positive, got {out_w}x{out_h}"
        )));
    }
    let (w, h) = (raster.width, raster.height);
    // (2i + 1) * H / (2 * out_h) in integers is the exact floor of the formula.
    let cols: Vec<usize> = (0..out_w).map(|j| (2 * j + 1) * w / (2 * out_w)).collect();
    let mut labels = Vec::with_capacity(out_w * out_h);
    for i in 0..out_h {
        let src = (2 * i + 1) * h / (2 * out_h);
        let row = &raster.labels[src * w..(src + 1) * w];
        labels.extend(cols.iter().map(|&c| row[c]));
    }
    LabelRaster::new(out_w, out_h, labels)
}
