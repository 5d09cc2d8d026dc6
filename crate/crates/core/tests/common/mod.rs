//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use diop::features::{extract_features, FeatureConfig, FeatureRow, FeatureTable};
use diop::instances::{derive_instances, AssignmentPolicy, Connectivity, DeriveConfig, InstanceMap};
use diop::learn::{Dataset, Forest, Node, Tree};
use diop::raster::{BitMask, BoundingBox, LabelRaster, RoiRecord, Split, TissueLabel};
use diop::synth::{generate_rois, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub fn random_mask<R: Rng>(rng: &mut R, w: usize, h: usize, density: f64) -> BitMask {
    let bits = (0..w * h).map(|_| rng.random_bool(density)).collect();
    BitMask::new(w, h, bits).unwrap()
}

pub fn random_raster<R: Rng>(rng: &mut R, w: usize, h: usize) -> LabelRaster {
    // Blocky rasters so that same-label runs occur alongside noise.
    let block = rng.random_range(1..=4);
    let cols = w.div_ceil(block);
    let seeds: Vec<u8> = (0..cols * h.div_ceil(block)).map(|_| rng.random_range(0..8)).collect();
    let codes: Vec<u8> = (0..w * h)
        .map(|i| {
            if rng.random_bool(0.1) {
                rng.random_range(0..8)
            } else {
                seeds[(i / w / block) * cols + (i % w) / block]
            }
        })
        .collect();
    LabelRaster::from_codes(w, h, &codes).unwrap()
}

/// Flood-fill labelling in scan order of each component's first pixel.
pub fn bfs_components(mask: &BitMask, connectivity: Connectivity) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let steps: Vec<(isize, isize)> = match connectivity {
        Connectivity::Four => vec![(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (dx, dy)))
            .filter(|&d| d != (0, 0))
            .collect(),
    };
    let mut ids = vec![0u32; w * h];
    let mut next = 0;
    for start in 0..w * h {
        if !mask.bits()[start] || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for &(dx, dy) in &steps {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.bits()[q] && ids[q] == 0 {
                    ids[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    ids
}

/// True when two labellings induce the same partition of the pixels.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    use std::collections::HashMap;
    let mut ab: HashMap<u32, u32> = HashMap::new();
    let mut ba: HashMap<u32, u32> = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x
    })
}

/// Per-pixel owner by exhaustive comparison of every covering box, written
/// out independently of the library's key function.
pub fn brute_weak(mask: &BitMask, boxes: &[BoundingBox], policy: AssignmentPolicy) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut owner = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let covering: Vec<usize> = (0..boxes.len())
                .filter(|&i| {
                    let b = boxes[i];
                    x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h
                })
                .collect();
            let cost = |i: usize| -> f64 {
                let b = boxes[i];
                match policy {
                    AssignmentPolicy::SmallestBox => (b.w * b.h) as f64,
                    AssignmentPolicy::NearestCenter => {
                        let cx = b.x as f64 + b.w as f64 / 2.0;
                        let cy = b.y as f64 + b.h as f64 / 2.0;
                        (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)
                    }
                    AssignmentPolicy::FirstBox => 0.0,
                }
            };
            let mut best: Option<usize> = None;
            for &i in &covering {
                best = match best {
                    Some(j) if cost(j) <= cost(i) => Some(j),
                    _ => Some(i),
                };
            }
            owner[y * w + x] = best;
        }
    }
    let mut id_of = vec![0u32; boxes.len()];
    let mut next = 0;
    for i in 0..boxes.len() {
        if owner.contains(&Some(i)) {
            next += 1;
            id_of[i] = next;
        }
    }
    owner.iter().map(|o| o.map_or(0, |i| id_of[i])).collect()
}

pub fn random_boxes<R: Rng>(rng: &mut R, w: usize, h: usize, n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let bw = rng.random_range(1..=w);
            let bh = rng.random_range(1..=h);
            BoundingBox::new(rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh)
        })
        .collect()
}

/// Random tree of at most `depth` levels over `d` features with thresholds
/// on a coarse grid, so different rows often share paths.
pub fn random_tree<R: Rng>(rng: &mut R, depth: usize, d: usize, n_classes: usize) -> Tree {
    fn grow<R: Rng>(rng: &mut R, nodes: &mut Vec<Node>, depth: usize, d: usize, n_classes: usize) -> usize {
        let i = nodes.len();
        if depth == 0 || rng.random_bool(0.2) {
            let mut counts: Vec<u32> = (0..n_classes).map(|_| rng.random_range(0..5)).collect();
            counts[rng.random_range(0..n_classes)] += 1;
            nodes.push(Node::Leaf { counts });
            return i;
        }
        nodes.push(Node::Leaf { counts: vec![1; n_classes] });
        let feature = rng.random_range(0..d);
        let threshold = rng.random_range(0..4) as f64 * 0.25 + 0.125;
        let left = grow(rng, nodes, depth - 1, d, n_classes);
        let right = grow(rng, nodes, depth - 1, d, n_classes);
        nodes[i] = Node::Split {
            feature,
            threshold,
            left,
            right,
            samples: 0,
        };
        i
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, depth, d, n_classes);
    Tree::from_nodes(nodes, n_classes).unwrap()
}

pub fn random_forest<R: Rng>(rng: &mut R, n_trees: usize, depth: usize, d: usize, n_classes: usize) -> Forest {
    let trees = (0..n_trees).map(|_| random_tree(rng, depth, d, n_classes)).collect();
    Forest::from_trees(trees, d, n_classes).unwrap()
}

/// `n` rows of rank-`rank` data in `d` dimensions plus a random offset.
pub fn low_rank(seed: u64, n: usize, d: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis: Vec<Vec<f64>> = (0..rank).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
    (0..n)
        .map(|_| {
            let coef: Vec<f64> = (0..rank).map(|_| rng.random_range(-3.0..3.0)).collect();
            (0..d).map(|j| offset[j] + (0..rank).map(|r| coef[r] * basis[r][j]).sum::<f64>()).collect()
        })
        .collect()
}

pub fn random_row<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Features of every synthetic ROI, instances derived with `derive`.
pub fn synth_table(cfg: &SynthConfig, derive: &DeriveConfig) -> (FeatureTable, Vec<RoiRecord>) {
    let rois = generate_rois(cfg).unwrap();
    let rows = rois
        .par_iter()
        .map(|(rec, roi)| {
            let inst: InstanceMap = derive_instances(&roi.raster, Some(&roi.boxes), derive).unwrap();
            FeatureRow {
                roi_id: rec.id.clone(),
                diagnosis: rec.diagnosis,
                features: extract_features(&roi.raster, &inst, &FeatureConfig::default()).unwrap(),
            }
        })
        .collect();
    (FeatureTable { rows }, rois.into_iter().map(|(r, _)| r).collect())
}

/// Train/test accuracy of a nearest-centroid classifier on z-scored features.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let d = ds.n_features();
    let train: Vec<_> = ds.samples.iter().filter(|s| s.split == Split::Train).collect();
    let test: Vec<_> = ds.samples.iter().filter(|s| s.split == Split::Test).collect();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|s| s.features[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|s| (s.features[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = |f: &[f64]| -> Vec<f64> { (0..d).map(|j| (f[j] - mean[j]) / sd[j]).collect() };
    let classes = 4;
    let mut centroid = vec![vec![0.0; d]; classes];
    let mut count = vec![0.0; classes];
    for s in &train {
        let c = s.diagnosis.unwrap().index();
        count[c] += 1.0;
        for (acc, v) in centroid[c].iter_mut().zip(z(&s.features)) {
            *acc += v;
        }
    }
    for (c, n) in centroid.iter_mut().zip(&count) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let hits = test
        .iter()
        .filter(|s| {
            let zs = z(&s.features);
            let dist = |c: &Vec<f64>| zs.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroid[a]).total_cmp(&dist(&centroid[b])))
                .unwrap();
            best == s.diagnosis.unwrap().index()
        })
        .count();
    hits as f64 / test.len() as f64
}

pub fn label_count(raster: &LabelRaster, label: TissueLabel) -> usize {
    raster.labels().iter().filter(|l| **l == label).count()
}
