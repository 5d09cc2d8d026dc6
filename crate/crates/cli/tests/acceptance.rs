//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p diop-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use diop::explain::{explain, shap_brute_for_class, shap_fast_for_class};
use diop::features::{
    block_range, duct_features, extract_features, feature_names, roi_features_with, BlockKind, FeatureConfig,
    FeatureTable, Level,
};
use diop::instances::{
    connected_components, derive_instances_weak, AssignmentPolicy, Connectivity, DeriveConfig,
};
use diop::learn::{pca_fit, run_split_eval, Classifier, Dataset, EvalConfig, FittedModel};
use diop::raster::{binarize, LabelSet, RoiRecord};
use diop::synth::SynthConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn block_sum(v: &[f64], r: std::ops::Range<usize>) -> f64 {
    v[r].iter().sum()
}

fn normalisation() -> Check {
    let names = feature_names();
    let bd_bd: Vec<usize> = [Level::Box, Level::Mask]
        .iter()
        .map(|l| names.iter().position(|n| *n == format!("BD & BD in {}", l.tag())).unwrap())
        .collect();
    let mut blocks = 0usize;
    for case in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let (w, h) = (rng.random_range(8..=48), rng.random_range(8..=48));
        let raster = random_raster(&mut rng, w, h);
        let n = rng.random_range(0..=5);
        let boxes = random_boxes(&mut rng, w, h, n);
        let conn = if rng.random_bool(0.5) { Connectivity::Four } else { Connectivity::Eight };
        let inst = derive_instances_weak(&binarize(&raster, LabelSet::default()), &boxes, AssignmentPolicy::SmallestBox)
            .map_err(|e| e.to_string())?;

        let roi = roi_features_with(&raster, conn);
        ensure((block_sum(&roi, 0..8) - 1.0).abs() <= 1e-9, || format!("case {case}: ROI histogram"))?;
        ensure((block_sum(&roi, 8..44) - 1.0).abs() <= 1e-9, || format!("case {case}: ROI co-occurrence"))?;
        blocks += 2;
        for level in [Level::Box, Level::Mask] {
            for duct in duct_features(&raster, &inst, level, conn).map_err(|e| e.to_string())? {
                let v = &duct.values;
                ensure((block_sum(v, 0..8) - 1.0).abs() <= 1e-9, || format!("case {case}: duct histogram"))?;
                let cooc = block_sum(v, 8..53);
                ensure(cooc == 0.0 || (cooc - 1.0).abs() <= 1e-9, || format!("case {case}: duct co-occurrence {cooc}"))?;
                ensure(v[52] == 0.0, || format!("case {case}: duct BD & BD = {}", v[52]))?;
                blocks += 2;
            }
        }
        let cfg = FeatureConfig {
            connectivity: conn,
            ..FeatureConfig::default()
        };
        let f = extract_features(&raster, &inst, &cfg).map_err(|e| e.to_string())?.values;
        for level in Level::ALL {
            if level != Level::Roi && inst.is_empty() {
                continue;
            }
            for kind in [BlockKind::Histogram, BlockKind::Cooccurrence] {
                let s = block_sum(&f, block_range(level, kind));
                ensure((s - 1.0).abs() <= 1e-9, || format!("case {case}: pooled {level:?} {kind:?} sums to {s}"))?;
                blocks += 1;
            }
        }
        for &i in &bd_bd {
            ensure(f[i] == 0.0, || format!("case {case}: {} = {}", names[i], f[i]))?;
        }
    }
    Ok(format!("500 cases, {blocks} blocks sum to 1, BD & BD exactly 0"))
}

fn components() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for case in 0..200 {
        let density = rng.random_range(0.2..0.7);
        let mask = random_mask(&mut rng, 64, 64, density);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let got = connected_components(&mask, conn, 0);
            ensure(same_partition(got.ids(), &bfs_components(&mask, conn)), || {
                format!("case {case} {conn:?}: partitions differ")
            })?;
        }
    }
    Ok("200 masks x 2 connectivities identical to flood fill".into())
}

fn weak_derivation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut overlapping = 0;
    for case in 0..100 {
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let density = rng.random_range(0.3..0.9);
        let mask = random_mask(&mut rng, w, h, density);
        let n = rng.random_range(1..=5);
        let boxes = random_boxes(&mut rng, w, h, n);
        let overlap = boxes.iter().enumerate().any(|(i, a)| {
            boxes[i + 1..]
                .iter()
                .any(|b| a.x < b.x_end() && b.x < a.x_end() && a.y < b.y_end() && b.y < a.y_end())
        });
        overlapping += overlap as usize;
        for policy in [AssignmentPolicy::SmallestBox, AssignmentPolicy::NearestCenter, AssignmentPolicy::FirstBox] {
            let got = derive_instances_weak(&mask, &boxes, policy).map_err(|e| e.to_string())?;
            ensure(got.ids() == brute_weak(&mask, &boxes, policy).as_slice(), || {
                format!("case {case} {policy:?}: assignment differs")
            })?;
        }
    }
    Ok(format!("100 cases x 3 policies equal exhaustive evaluation ({overlapping} with overlapping boxes)"))
}

fn shap() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let d = rng.random_range(1..=8);
        let n_classes = rng.random_range(2..=4);
        let (trees, depth) = (rng.random_range(1..=5), rng.random_range(1..=3));
        let forest = random_forest(&mut rng, trees, depth, d, n_classes);
        let n_bg = rng.random_range(1..=8);
        let background: Vec<Vec<f64>> = (0..n_bg).map(|_| random_row(&mut rng, d)).collect();
        let x = random_row(&mut rng, d);
        for class in 0..n_classes {
            let fast = shap_fast_for_class(&forest, &x, &background, class).map_err(|e| e.to_string())?;
            let brute = shap_brute_for_class(&forest, &x, &background, class).map_err(|e| e.to_string())?;
            let diff = fast.iter().zip(&brute).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
            ensure(diff <= 1e-9, || format!("case {case} class {class}: |fast - brute| = {diff:e}"))?;
        }
    }
    let forest = random_forest(&mut rng, 30, 8, 150, 4);
    let background: Vec<Vec<f64>> = (0..64).map(|_| random_row(&mut rng, 150)).collect();
    let mut gap: f64 = 0.0;
    for _ in 0..20 {
        let e = explain(&forest, &random_row(&mut rng, 150), &background, None).map_err(|e| e.to_string())?;
        gap = gap.max(e.local_accuracy_gap());
    }
    ensure(gap <= 1e-9, || format!("local accuracy gap {gap:e} at d = 150"))?;
    Ok(format!("max |fast - brute| {worst:.1e} over 50 points; max local accuracy gap {gap:.1e} at d = 150"))
}

fn pca() -> Check {
    let mut ortho: f64 = 0.0;
    let mut recon: f64 = 0.0;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let (n, d) = (rng.random_range(5..40), rng.random_range(3..40));
        let rank = rng.random_range(1..=4usize).min(n - 1).min(d);
        let x = low_rank(case, n, d, rank);
        let p = pca_fit(&x, rank).map_err(|e| e.to_string())?;
        for a in 0..rank {
            for b in 0..rank {
                let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(u, v)| u * v).sum();
                ortho = ortho.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        for row in &x {
            let back = p
                .inverse_transform_row(&p.transform_row(row).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            recon = recon.max(back.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    ensure(ortho <= 1e-9, || format!("orthonormality error {ortho:e}"))?;
    ensure(recon <= 1e-9, || format!("reconstruction error {recon:e}"))?;
    let cfg = EvalConfig::default();
    let y: Vec<usize> = (0..30).map(|i| i % 2).collect();
    for d in [20, 29, 30, 31, 150] {
        let m = FittedModel::fit(&low_rank(d as u64, 30, d, 10), &y, 2, &cfg, 0).map_err(|e| e.to_string())?;
        let k = m.pca.as_ref().map(|p| p.k());
        let expected = (d > 30).then_some(20);
        ensure(k == expected, || format!("n = 30, d = {d}: PCA k {k:?}, expected {expected:?}"))?;
        ensure(m.forest.n_features() == expected.unwrap_or(d), || format!("d = {d}: forest width"))?;
    }
    Ok(format!(
        "orthonormality {ortho:.1e}, rank-k reconstruction {recon:.1e}, k = 20 exactly when d > n_train"
    ))
}

fn diop_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diop"))
}

fn performance() -> Check {
    let out = diop_bin()
        .args(["bench", "--size", "512", "--ducts", "50", "--runs", "5"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let median = v["median_seconds"].as_f64().ok_or("no median in bench output")?;
    ensure(v["instances"] == 50, || format!("bench raster has {} ducts", v["instances"]))?;
    ensure(median <= 1.0, || format!("median {median:.3} s"))?;
    Ok(format!("512x512, 50 ducts, single thread: median {median:.4} s over 5 runs"))
}

struct SeedResult {
    all: f64,
    roi: f64,
    mask: f64,
    centroid: f64,
}

fn seed_results() -> Result<Vec<SeedResult>, String> {
    let kinds = [BlockKind::Histogram, BlockKind::Cooccurrence];
    (0..10u64)
        .map(|seed| {
            let cfg = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            let (table, manifest): (FeatureTable, Vec<RoiRecord>) = synth_table(&cfg, &DeriveConfig::default());
            let full = Dataset::from_table(&table, Some(&manifest), false);
            let acc = |ds: &Dataset| -> Result<f64, String> {
                Ok(run_split_eval(ds, &EvalConfig::default(), 1, seed)
                    .map_err(|e| e.to_string())?
                    .mean("accuracy"))
            };
            let cols = |l| diop::features::select_columns(&[l], &kinds);
            Ok(SeedResult {
                all: acc(&full)?,
                roi: acc(&full.select_columns(&cols(Level::Roi)))?,
                mask: acc(&full.select_columns(&cols(Level::Mask)))?,
                centroid: nearest_centroid_accuracy(&full),
            })
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fourway(results: &[SeedResult]) -> Check {
    let all = mean(results.iter().map(|r| r.all));
    let centroid = mean(results.iter().map(|r| r.centroid));
    let per_seed: Vec<String> = results.iter().map(|r| format!("{:.3}", r.all)).collect();
    let detail = format!(
        "mean accuracy {all:.4} over 10 seeds [{}]; nearest-centroid oracle {centroid:.4}",
        per_seed.join(" ")
    );
    ensure(all >= 0.90, || detail.clone())?;
    Ok(detail)
}

fn ablation(results: &[SeedResult]) -> Check {
    let all = mean(results.iter().map(|r| r.all));
    let roi = mean(results.iter().map(|r| r.roi));
    let mask = mean(results.iter().map(|r| r.mask));
    let detail = format!("all {all:.4} > ROI {roi:.4} >= duct mask {mask:.4} (10-seed means)");
    ensure(all > roi && roi >= mask, || detail.clone())?;
    Ok(detail)
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism() -> Check {
    let stages: &[&[&str]] = &[
        &["synth", "--per-class", "10", "--seed", "5"],
        &["derive"],
        &["derive", "--method", "cc", "--out", "cc"],
        &["match", "cc/dcis_000.pgm", "instances/dcis_000.pgm", "--out", "match.json"],
        &["features"],
        &["train", "--task", "fourway"],
        &["eval", "--task", "dcis-vs-atypia", "--repeats", "100", "--seed", "7", "--out", "binary.json"],
        &["eval", "--task", "fourway", "--out", "fourway.json"],
        &["explain", "--top-k", "5"],
    ];
    let run = || -> Result<(tempfile::TempDir, Vec<Vec<u8>>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut stdout = Vec::new();
        for args in stages {
            let out = diop_bin()
                .args(*args)
                .current_dir(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.success(), || {
                format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
            })?;
            stdout.push(out.stdout);
        }
        Ok((dir, stdout))
    };
    let (a, out_a) = run()?;
    let (b, out_b) = run()?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    ensure(fa.keys().eq(fb.keys()), || "runs wrote different file sets".into())?;
    if let Some((p, _)) = fa.iter().find(|(p, bytes)| fb[*p] != **bytes) {
        return Err(format!("{} differs between runs", p.display()));
    }
    ensure(out_a == out_b, || "stage stdout differs between runs".into())?;
    Ok(format!(
        "{} stages run twice: {} output files byte-identical",
        stages.len(),
        fa.len()
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, budget: Option<f64>, check: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let result = check();
        let secs = t.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let timing = match budget {
            Some(b) if secs > b => {
                pass = false;
                detail.push_str(&format!("; runtime {secs:.1} s exceeds {b} s"));
                format!("{secs:.1} s / {b} s")
            }
            Some(b) => format!("{secs:.1} s / {b} s"),
            None => format!("{secs:.1} s"),
        };
        failed += !pass as usize;
        println!("{} {name}: {detail} ({timing})", if pass { "PASS" } else { "FAIL" });
    };
    report("feature normalisation", Some(10.0), &mut normalisation);
    report("connected components oracle", Some(5.0), &mut components);
    report("weak derivation brute force", Some(5.0), &mut weak_derivation);
    report("SHAP oracle equivalence", Some(60.0), &mut shap);
    report("PCA checks", None, &mut pca);
    report("feature extraction performance", None, &mut performance);
    let mut results: Option<Result<Vec<SeedResult>, String>> = None;
    report("synthetic four-way evaluation", Some(600.0), &mut || {
        let r = results.get_or_insert_with(seed_results);
        r.as_deref().map_err(Clone::clone).and_then(fourway)
    });
    report("ablation direction", None, &mut || match &results {
        Some(r) => r.as_deref().map_err(Clone::clone).and_then(ablation),
        None => Err("four-way results missing".into()),
    });
    report("CLI determinism", None, &mut determinism);
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
