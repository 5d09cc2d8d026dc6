//! Duct instance maps: the connected-components baseline, the weak
//! box-and-foreground derivation, and IoU matching between two maps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, BitMask, BoundingBox, LabelRaster, LabelSet, RasterError};

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid instance map: {0}")]
    Invalid(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Summary of one instance: its id, tight bounding box, and pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub area: usize,
}

/// Per-pixel duct instance ids (0 = none) with per-instance summaries,
/// sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    instances: Vec<InstanceInfo>,
}

impl InstanceMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
            instances: Vec::new(),
        }
    }

    /// Builds a map from raw ids, deriving tight boxes and areas.
    pub fn from_ids(width: usize, height: usize, ids: Vec<u32>) -> Result<Self, InstanceError> {
        if ids.len() != width * height {
            return Err(InstanceError::Invalid(format!(
                "{} ids supplied for a {width}x{height} map",
                ids.len()
            )));
        }
        // id -> (min_x, min_y, max_x, max_y, area)
        let mut acc: BTreeMap<u32, (usize, usize, usize, usize, usize)> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let (x, y) = (i % width, i / width);
            let e = acc.entry(id).or_insert((x, y, x, y, 0));
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
            e.4 += 1;
        }
        let instances = acc
            .into_iter()
            .map(|(id, (x0, y0, x1, y1, area))| InstanceInfo {
                id,
                bbox: BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                area,
            })
            .collect();
        Ok(Self {
            width,
            height,
            ids,
            instances,
        })
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
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn instances(&self) -> &[InstanceInfo] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, id: u32) -> Option<&InstanceInfo> {
        self.instances
            .binary_search_by_key(&id, |i| i.id)
            .ok()
            .map(|k| &self.instances[k])
    }

    /// Union of all instance pixels.
    pub fn foreground(&self) -> BitMask {
        BitMask::new(self.width, self.height, self.ids.iter().map(|&i| i != 0).collect())
            .expect("dimensions agree")
    }

    /// Applies `f` to every nonzero id. `f` must be injective for the result
    /// to describe the same partition.
    pub fn relabel(&self, f: impl Fn(u32) -> u32) -> Result<Self, InstanceError> {
        let ids = self.ids.iter().map(|&i| if i == 0 { 0 } else { f(i) }).collect();
        Self::from_ids(self.width, self.height, ids)
    }

    pub fn sidecar(&self) -> InstanceSidecar {
        InstanceSidecar {
            width: self.width,
            height: self.height,
            instances: self.instances.clone(),
        }
    }
}

/// JSON document persisted next to an instance raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSidecar {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<InstanceInfo>,
}

pub fn encode_instance_raster(map: &InstanceMap) -> Result<Vec<u8>, InstanceError> {
    let samples = map
        .ids
        .iter()
        .map(|&id| {
            u16::try_from(id).map_err(|_| InstanceError::Invalid(format!("instance id {id} exceeds 65535")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(raster::encode_pgm(map.width, map.height, 65535, &samples))
}

pub fn decode_instance_raster(bytes: &[u8]) -> Result<InstanceMap, InstanceError> {
    let img = raster::decode_pgm(bytes)?;
    let ids = img.samples.into_iter().map(u32::from).collect();
    InstanceMap::from_ids(img.width, img.height, ids)
}

pub fn write_instance_raster(map: &InstanceMap, path: impl AsRef<Path>) -> Result<(), InstanceError> {
    let bytes = encode_instance_raster(map)?;
    Ok(raster::write_bytes(path.as_ref(), &bytes)?)
}

pub fn read_instance_raster(path: impl AsRef<Path>) -> Result<InstanceMap, InstanceError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| raster::io_err(path, e))?;
    decode_instance_raster(&bytes)
}

/// Writes the 16-bit raster plus its `{id, box, area}` sidecar.
pub fn write_instance_map(
    map: &InstanceMap,
    raster_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<(), InstanceError> {
    write_instance_raster(map, raster_path)?;
    Ok(raster::write_json(&map.sidecar(), sidecar_path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Morphology

/// Per-pixel count of set bits inside the (2r+1)² window, clipped to the image.
fn window_counts(bits: &[bool], width: usize, height: usize, r: usize) -> Vec<u32> {
    let stride = width + 1;
    let mut integral = vec![0u32; stride * (height + 1)];
    for y in 0..height {
        let mut row = 0u32;
        for x in 0..width {
            row += bits[y * width + x] as u32;
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0u32; width * height];
    for y in 0..height {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(height);
        for x in 0..width {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(width);
            out[y * width + x] = integral[y1 * stride + x1] + integral[y0 * stride + x0]
                - integral[y0 * stride + x1]
                - integral[y1 * stride + x0];
        }
    }
    out
}

fn window_area(x: usize, y: usize, width: usize, height: usize, r: usize) -> u32 {
    let w = (x + r + 1).min(width) - x.saturating_sub(r);
    let h = (y + r + 1).min(height) - y.saturating_sub(r);
    (w * h) as u32
}

/// Closing (dilation then erosion) with a (2r+1)×(2r+1) square element.
/// Pixels outside the image are ignored by both passes, so the result always
/// contains the input.
pub fn morphological_close(mask: &BitMask, radius: usize) -> BitMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let dilated: Vec<bool> = window_counts(mask.bits(), w, h, radius)
        .into_iter()
        .map(|c| c > 0)
        .collect();
    let counts = window_counts(&dilated, w, h, radius);
    let bits = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c == window_area(i % w, i / w, w, h, radius))
        .collect();
    BitMask::new(w, h, bits).expect("dimensions agree")
}

// ---------------------------------------------------------------------------
// Connected components

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    /// Neighbour offsets (dx, dy) for this connectivity.
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            _ => Err(format!("connectivity must be 4 or 8, got {s:?}")),
        }
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Keep the smaller label as root so roots follow scan order.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labelling. Components smaller than `min_area` are
/// dropped; surviving components are numbered 1..N in raster-scan order of
/// their first pixel.
pub fn connected_components(mask: &BitMask, connectivity: Connectivity, min_area: usize) -> InstanceMap {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    const NONE: u32 = u32::MAX;
    let mut provisional = vec![NONE; w * h];
    let mut uf = UnionFind::new();

    // Already-visited neighbours in scan order.
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            let mut label = NONE;
            for &(dx, dy) in back {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize {
                    continue;
                }
                let n = provisional[ny as usize * w + nx as usize];
                if n == NONE {
                    continue;
                }
                if label == NONE {
                    label = n;
                } else if n != label {
                    uf.union(label, n);
                }
            }
            if label == NONE {
                label = uf.make();
            }
            provisional[i] = label;
        }
    }

    let mut area = vec![0usize; uf.parent.len()];
    for p in provisional.iter_mut().filter(|p| **p != NONE) {
        *p = uf.find(*p);
        area[*p as usize] += 1;
    }

    let mut final_id = vec![0u32; uf.parent.len()];
    let mut next = 1u32;
    let mut ids = vec![0u32; w * h];
    for (i, &root) in provisional.iter().enumerate() {
        if root == NONE || area[root as usize] < min_area {
            continue;
        }
        let slot = &mut final_id[root as usize];
        if *slot == 0 {
            *slot = next;
            next += 1;
        }
        ids[i] = *slot;
    }
    InstanceMap::from_ids(w, h, ids).expect("dimensions agree")
}

// ---------------------------------------------------------------------------
// Weak derivation

/// Rule choosing the owning box for a foreground pixel covered by several
/// boxes. Every rule falls back to the lowest box index on ties.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentPolicy {
    /// Smallest-area covering box.
    #[default]
    SmallestBox,
    /// Box whose centre is closest to the pixel centre.
    NearestCenter,
    /// First covering box in input order.
    FirstBox,
}

impl AssignmentPolicy {
    /// Ordering key of box `index` for the pixel at (x, y); lower wins.
    #[inline]
    pub fn key(self, b: &BoundingBox, index: usize, x: usize, y: usize) -> (u64, usize) {
        match self {
            AssignmentPolicy::SmallestBox => (b.area() as u64, index),
            AssignmentPolicy::NearestCenter => {
                // Doubled coordinates keep centres on the integer grid.
                let dx = (2 * x + 1) as i64 - (2 * b.x + b.w) as i64;
                let dy = (2 * y + 1) as i64 - (2 * b.y + b.h) as i64;
                ((dx * dx + dy * dy) as u64, index)
            }
            AssignmentPolicy::FirstBox => (0, index),
        }
    }
}

impl FromStr for AssignmentPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smallest-box" | "smallest" => Ok(AssignmentPolicy::SmallestBox),
            "nearest-center" | "nearest" => Ok(AssignmentPolicy::NearestCenter),
            "first-box" | "first" => Ok(AssignmentPolicy::FirstBox),
            _ => Err(format!("unknown assignment policy {s:?}")),
        }
    }
}

/// Box ∩ foreground instance derivation. Each covered foreground pixel goes
/// to the box chosen by `policy`; boxes left with no pixels produce no
/// instance, and the remaining boxes are numbered 1..N in input order.
///
/// Boxes must already lie inside the mask (see
/// [`raster::BoxDocument::clamped_boxes`]).
pub fn derive_instances_weak(
    mask: &BitMask,
    boxes: &[BoundingBox],
    policy: AssignmentPolicy,
) -> Result<InstanceMap, InstanceError> {
    let (w, h) = (mask.width(), mask.height());
    if let Some(b) = boxes.iter().find(|b| !b.fits(w, h)) {
        return Err(InstanceError::Invalid(format!("box {b:?} exceeds the {w}x{h} raster")));
    }
    let bits = mask.bits();
    let mut owner: Vec<Option<((u64, usize), usize)>> = vec![None; w * h];
    for (bi, b) in boxes.iter().enumerate() {
        for y in b.y..b.y_end() {
            for x in b.x..b.x_end() {
                let i = y * w + x;
                if !bits[i] {
                    continue;
                }
                let key = policy.key(b, bi, x, y);
                match owner[i] {
                    Some((k, _)) if k <= key => {}
                    _ => owner[i] = Some((key, bi)),
                }
            }
        }
    }
    let mut used = vec![false; boxes.len()];
    for (_, bi) in owner.iter().flatten() {
        used[*bi] = true;
    }
    let mut id_of = vec![0u32; boxes.len()];
    let mut next = 1;
    for (bi, u) in used.iter().enumerate() {
        if *u {
            id_of[bi] = next;
            next += 1;
        }
    }
    let ids = owner
        .iter()
        .map(|o| o.map_or(0, |(_, bi)| id_of[bi]))
        .collect();
    InstanceMap::from_ids(w, h, ids)
}

// ---------------------------------------------------------------------------
// Matching

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub id_a: u32,
    pub id_b: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub mean_iou: f64,
    pub matched_pairs: Vec<MatchedPair>,
    pub unmatched_a: usize,
    pub unmatched_b: usize,
}

/// Greedy one-to-one matching in descending IoU order (ties by id pair).
/// Only pairs with IoU ≥ `iou_threshold` and a nonzero overlap are matched.
pub fn match_instances(a: &InstanceMap, b: &InstanceMap, iou_threshold: f64) -> Result<MatchReport, InstanceError> {
    if a.width != b.width || a.height != b.height {
        return Err(InstanceError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&ia, &ib) in a.ids.iter().zip(&b.ids) {
        if ia != 0 && ib != 0 {
            *inter.entry((ia, ib)).or_default() += 1;
        }
    }
    let area_a: HashMap<u32, usize> = a.instances.iter().map(|i| (i.id, i.area)).collect();
    let area_b: HashMap<u32, usize> = b.instances.iter().map(|i| (i.id, i.area)).collect();
    let mut candidates: Vec<MatchedPair> = inter
        .into_iter()
        .map(|((ia, ib), n)| MatchedPair {
            id_a: ia,
            id_b: ib,
            iou: n as f64 / (area_a[&ia] + area_b[&ib] - n) as f64,
        })
        .filter(|p| p.iou >= iou_threshold)
        .collect();
    candidates.sort_by(|p, q| {
        q.iou
            .total_cmp(&p.iou)
            .then(p.id_a.cmp(&q.id_a))
            .then(p.id_b.cmp(&q.id_b))
    });

    let mut used_a = std::collections::HashSet::new();
    let mut used_b = std::collections::HashSet::new();
    let mut matched_pairs = Vec::new();
    for p in candidates {
        if used_a.contains(&p.id_a) || used_b.contains(&p.id_b) {
            continue;
        }
        used_a.insert(p.id_a);
        used_b.insert(p.id_b);
        matched_pairs.push(p);
    }
    let mean_iou = if matched_pairs.is_empty() {
        0.0
    } else {
        matched_pairs.iter().map(|p| p.iou).sum::<f64>() / matched_pairs.len() as f64
    };
    Ok(MatchReport {
        mean_iou,
        unmatched_a: a.len() - matched_pairs.len(),
        unmatched_b: b.len() - matched_pairs.len(),
        matched_pairs,
    })
}

// ---------------------------------------------------------------------------
// Derivation front end

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeriveMethod {
    /// Connected components of the closed foreground mask.
    Cc,
    /// Box ∩ foreground with overlap resolution.
    #[default]
    Weak,
}

impl FromStr for DeriveMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cc" => Ok(DeriveMethod::Cc),
            "weak" => Ok(DeriveMethod::Weak),
            _ => Err(format!("unknown derivation method {s:?} (cc, weak)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeriveConfig {
    pub method: DeriveMethod,
    pub foreground: LabelSet,
    pub policy: AssignmentPolicy,
    pub connectivity: Connectivity,
    /// Closing radius applied to the foreground before components are
    /// labelled (`cc` only).
    pub closing_radius: usize,
    /// Components smaller than this are dropped (`cc` only).
    pub min_area: usize,
}

impl Default for DeriveConfig {
    fn default() -> Self {
        Self {
            method: DeriveMethod::default(),
            foreground: LabelSet::default(),
            policy: AssignmentPolicy::default(),
            connectivity: Connectivity::default(),
            closing_radius: 1,
            min_area: 20,
        }
    }
}

/// Derives duct instances from a label raster. `boxes` is required by the
/// weak method and ignored by `cc`.
pub fn derive_instances(
    raster: &LabelRaster,
    boxes: Option<&[BoundingBox]>,
    config: &DeriveConfig,
) -> Result<InstanceMap, InstanceError> {
    let mask = raster::binarize(raster, config.foreground);
    match config.method {
        DeriveMethod::Cc => {
            let closed = morphological_close(&mask, config.closing_radius);
            Ok(connected_components(&closed, config.connectivity, config.min_area))
        }
        DeriveMethod::Weak => {
            let boxes = boxes.ok_or_else(|| InstanceError::Invalid("weak derivation needs boxes".into()))?;
            derive_instances_weak(&mask, boxes, config.policy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BitMask {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.bytes().map(|c| c == b'#')).collect();
        BitMask::new(w, h, bits).unwrap()
    }

    #[test]
    fn closing_fills_single_gap() {
        let m = mask_from(&["#.#.."]);
        let c = morphological_close(&m, 1);
        assert_eq!(c, mask_from(&["###.."]));
        assert_eq!(morphological_close(&m, 0), m);
        let empty = BitMask::empty(6, 4);
        assert_eq!(morphological_close(&empty, 3), empty);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = mask_from(&["#.", ".#"]);
        assert_eq!(connected_components(&m, Connectivity::Four, 1).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eight, 1).len(), 1);
        assert!(connected_components(&BitMask::empty(3, 3), Connectivity::Four, 1).is_empty());
    }

    #[test]
    fn components_scan_order_and_min_area() {
        let m = mask_from(&[
            "..#...", //
            "..#.##", //
            "#.....", //
            "##..#.",
        ]);
        let cc = connected_components(&m, Connectivity::Four, 1);
        assert_eq!(cc.len(), 4);
        assert_eq!(cc.id_at(2, 0), 1);
        assert_eq!(cc.id_at(4, 1), 2);
        assert_eq!(cc.id_at(0, 2), 3);
        assert_eq!(cc.id_at(4, 3), 4);
        let big = connected_components(&m, Connectivity::Four, 2);
        assert_eq!(big.len(), 3);
        assert_eq!(big.id_at(4, 3), 0);
        assert_eq!(big.instance(3).unwrap().area, 3);
        assert_eq!(big.instance(3).unwrap().bbox, BoundingBox::new(0, 2, 2, 2));
    }

    #[test]
    fn u_shape_merges_in_second_pass() {
        let m = mask_from(&["#.#", "#.#", "###"]);
        let cc = connected_components(&m, Connectivity::Four, 1);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc.instances()[0].area, 7);
    }

    #[test]
    fn weak_derivation_trivial_cases() {
        let m = mask_from(&["##..", ".##.", "...#"]);
        assert!(derive_instances_weak(&m, &[], AssignmentPolicy::default()).unwrap().is_empty());
        let whole = derive_instances_weak(&m, &[BoundingBox::new(0, 0, 4, 3)], AssignmentPolicy::default()).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole.foreground(), m);
    }

    #[test]
    fn weak_derivation_overlap_goes_to_smaller_box() {
        let m = BitMask::new(8, 8, vec![true; 64]).unwrap();
        let boxes = [BoundingBox::new(0, 0, 6, 6), BoundingBox::new(4, 4, 4, 4)];
        let map = derive_instances_weak(&m, &boxes, AssignmentPolicy::SmallestBox).unwrap();
        // Box A keeps 36 - 4 overlap pixels; box B keeps its full 16.
        assert_eq!(map.instance(1).unwrap().area, 32);
        assert_eq!(map.instance(2).unwrap().area, 16);
        assert_eq!(map.id_at(5, 5), 2);
        assert_eq!(map.id_at(7, 0), 0);
        let first = derive_instances_weak(&m, &boxes, AssignmentPolicy::FirstBox).unwrap();
        assert_eq!(first.instance(1).unwrap().area, 36);
        assert_eq!(first.instance(2).unwrap().area, 12);
    }

    #[test]
    fn swallowed_box_yields_no_instance() {
        let m = BitMask::new(6, 6, vec![true; 36]).unwrap();
        // The big box is covered entirely by two smaller ones.
        let boxes = [
            BoundingBox::new(0, 0, 6, 3),
            BoundingBox::new(0, 0, 6, 6),
            BoundingBox::new(0, 3, 6, 3),
        ];
        let map = derive_instances_weak(&m, &boxes, AssignmentPolicy::SmallestBox).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map.id_at(0, 0), 1);
        assert_eq!(map.id_at(0, 5), 2);
    }

    #[test]
    fn match_identity_and_disjoint() {
        let m = mask_from(&["##..#", "##..#", ".....", "###.."]);
        let a = connected_components(&m, Connectivity::Four, 1);
        let r = match_instances(&a, &a, 0.5).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.matched_pairs.len(), 3);
        assert_eq!((r.unmatched_a, r.unmatched_b), (0, 0));

        let other = mask_from(&["..##.", "..##.", "#####", "....."]);
        let b = connected_components(&other, Connectivity::Four, 1);
        let r = match_instances(&a, &b, 0.0).unwrap();
        assert!(r.matched_pairs.is_empty());
        assert_eq!(r.mean_iou, 0.0);

        let small = InstanceMap::empty(2, 2);
        assert!(matches!(
            match_instances(&a, &small, 0.5),
            Err(InstanceError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn match_half_overlaps_hand_computed() {
        // a: instance 1 = cols 0..4 of row 0, instance 2 = cols 0..4 of row 2.
        // b: instance 1 = cols 2..6 of row 0, instance 2 = cols 0..2 of row 2.
        let mut ia = vec![0u32; 18];
        let mut ib = vec![0u32; 18];
        for x in 0..4 {
            ia[x] = 1;
            ia[12 + x] = 2;
        }
        for x in 2..6 {
            ib[x] = 1;
        }
        for x in 0..2 {
            ib[12 + x] = 2;
        }
        let a = InstanceMap::from_ids(6, 3, ia).unwrap();
        let b = InstanceMap::from_ids(6, 3, ib).unwrap();
        let r = match_instances(&a, &b, 0.25).unwrap();
        // |∩| = 2, |∪| = 6 → 1/3; |∩| = 2, |∪| = 4 → 1/2.
        assert_eq!(r.matched_pairs.len(), 2);
        assert_eq!((r.matched_pairs[0].id_a, r.matched_pairs[0].id_b), (2, 2));
        assert!((r.matched_pairs[0].iou - 0.5).abs() < 1e-12);
        assert!((r.matched_pairs[1].iou - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.mean_iou - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        let strict = match_instances(&a, &b, 0.4).unwrap();
        assert_eq!(strict.matched_pairs.len(), 1);
        assert_eq!((strict.unmatched_a, strict.unmatched_b), (1, 1));
    }

    #[test]
    fn instance_raster_round_trip_with_large_ids() {
        let ids: Vec<u32> = (0..12).map(|i| if i % 3 == 0 { 0 } else { 300 + i }).collect();
        let map = InstanceMap::from_ids(4, 3, ids).unwrap();
        let bytes = encode_instance_raster(&map).unwrap();
        assert_eq!(decode_instance_raster(&bytes).unwrap(), map);
        let too_big = InstanceMap::from_ids(1, 1, vec![70_000]).unwrap();
        assert!(encode_instance_raster(&too_big).is_err());
    }
}
