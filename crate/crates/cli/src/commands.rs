//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diop::explain::{sample_background, ShapReport};
use diop::features::{extract_features, select_columns, Aggregation, BlockKind, FeatureRow, FeatureTable, Level};
use diop::instances::{
    derive_instances, match_instances, read_instance_raster, write_instance_map, AssignmentPolicy, Connectivity,
    DeriveConfig, DeriveMethod, InstanceMap,
};
use diop::learn::{run_loocv, run_split_eval, Dataset, ModelFile, Sample, Task};
use diop::raster::{read_boxes, read_label_raster, read_manifest, BoundingBox, LabelRaster, RoiRecord, Split};
use diop::synth::{benchmark_roi, generate_dataset};
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    manifest_path, AggregationArg, BenchArgs, CliError, ConnectivityArg, DeriveArgs, EvalArgs, ExplainArgs,
    FeaturesArgs, LearnArgs, LevelArg, MatchArgs, MethodArg, PipelineConfig, PolicyArg, ServeArgs, SplitArg,
    SynthArgs, TrainArgs,
};

impl From<MethodArg> for DeriveMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cc => DeriveMethod::Cc,
            MethodArg::Weak => DeriveMethod::Weak,
        }
    }
}

impl From<PolicyArg> for AssignmentPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::SmallestBox => AssignmentPolicy::SmallestBox,
            PolicyArg::NearestCenter => AssignmentPolicy::NearestCenter,
            PolicyArg::FirstBox => AssignmentPolicy::FirstBox,
        }
    }
}

impl From<ConnectivityArg> for Connectivity {
    fn from(c: ConnectivityArg) -> Self {
        match c {
            ConnectivityArg::Four => Connectivity::Four,
            ConnectivityArg::Eight => Connectivity::Eight,
        }
    }
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::AreaWeighted => Aggregation::AreaWeighted,
        }
    }
}

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Roi => Level::Roi,
            LevelArg::Box => Level::Box,
            LevelArg::Mask => Level::Mask,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn synth(mut config: PipelineConfig, args: SynthArgs) -> Result<(), CliError> {
    if let Some(n) = args.per_class {
        config.synth.counts = [n; 4];
    }
    if let Some(w) = args.width {
        config.synth.width = w;
    }
    if let Some(h) = args.height {
        config.synth.height = h;
    }
    config.validate()?;
    let out = args.out.unwrap_or(config.paths.data);
    let records = generate_dataset(&config.synth, &out)?;
    println!("wrote {} ROIs to {}", records.len(), out.display());
    Ok(())
}

/// Records of `root/manifest.json`; their paths are relative to `root`.
pub fn load_manifest(root: &Path) -> Result<Vec<RoiRecord>, CliError> {
    Ok(read_manifest(manifest_path(root))?)
}

/// Boxes of `record`, clamped into its raster; empty when it has no boxes
/// document.
pub fn record_boxes(root: &Path, record: &RoiRecord, raster: &LabelRaster) -> Result<Vec<BoundingBox>, CliError> {
    match &record.boxes {
        Some(p) => Ok(read_boxes(root.join(p))?.clamped_boxes(raster.width(), raster.height())),
        None => Ok(Vec::new()),
    }
}

/// Derives the instances of one manifest ROI from its stored boxes.
pub fn derive_record(root: &Path, record: &RoiRecord, config: &DeriveConfig) -> Result<InstanceMap, CliError> {
    let raster = read_label_raster(root.join(&record.raster))?;
    let boxes = match config.method {
        DeriveMethod::Weak if record.boxes.is_none() => {
            return Err(CliError::Config(format!(
                "ROI {} has no boxes document; weak derivation needs one",
                record.id
            )))
        }
        DeriveMethod::Weak => record_boxes(root, record, &raster)?,
        DeriveMethod::Cc => Vec::new(),
    };
    Ok(derive_instances(&raster, Some(&boxes), config)?)
}

pub fn instance_raster_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.pgm"))
}

#[derive(Debug, Serialize)]
struct DeriveSummary<'a> {
    id: &'a str,
    instances: usize,
}

pub fn derive(mut config: PipelineConfig, args: DeriveArgs) -> Result<(), CliError> {
    let d = &mut config.derive;
    if let Some(m) = args.method {
        d.method = m.into();
    }
    if let Some(p) = args.policy {
        d.policy = p.into();
    }
    if let Some(c) = args.connectivity {
        d.connectivity = c.into();
    }
    if let Some(r) = args.closing_radius {
        d.closing_radius = r;
    }
    if let Some(a) = args.min_area {
        d.min_area = a;
    }
    config.validate()?;
    let root = args.data.unwrap_or(config.paths.data);
    let out = args.out.unwrap_or(config.paths.instances);
    let mut records = load_manifest(&root)?;
    if !args.rois.is_empty() {
        if let Some(missing) = args.rois.iter().find(|id| !records.iter().any(|r| &r.id == *id)) {
            return Err(CliError::Usage(format!("ROI {missing:?} is not in the manifest")));
        }
        records.retain(|r| args.rois.contains(&r.id));
    }
    create_dir(&out)?;
    let counts = records
        .par_iter()
        .map(|rec| {
            let map = derive_record(&root, rec, &config.derive)?;
            write_instance_map(&map, instance_raster_path(&out, &rec.id), out.join(format!("{}.json", rec.id)))?;
            Ok(map.len())
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let summary: Vec<DeriveSummary> = records
        .iter()
        .zip(&counts)
        .map(|(r, &n)| DeriveSummary {
            id: &r.id,
            instances: n,
        })
        .collect();
    write_json(&summary, &out.join("summary.json"))?;
    println!(
        "derived {} instances in {} ROIs to {}",
        counts.iter().sum::<usize>(),
        records.len(),
        out.display()
    );
    Ok(())
}

pub fn match_rasters(args: MatchArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.iou) {
        return Err(CliError::Usage(format!("--iou {} is outside [0, 1]", args.iou)));
    }
    let a = read_instance_raster(&args.a)?;
    let b = read_instance_raster(&args.b)?;
    let report = match_instances(&a, &b, args.iou)?;
    match &args.out {
        Some(p) => write_json(&report, p)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

pub fn features(mut config: PipelineConfig, args: FeaturesArgs) -> Result<(), CliError> {
    if let Some(c) = args.connectivity {
        config.features.connectivity = c.into();
    }
    if let Some(a) = args.aggregation {
        config.features.aggregation = a.into();
    }
    config.validate()?;
    let root = args.data.unwrap_or(config.paths.data);
    let inst_dir = args.instances.unwrap_or(config.paths.instances);
    let out = args.out.unwrap_or(config.paths.features);
    let records = load_manifest(&root)?;
    let rows = records
        .par_iter()
        .map(|rec| {
            let raster = read_label_raster(root.join(&rec.raster))?;
            let inst = read_instance_raster(instance_raster_path(&inst_dir, &rec.id))?;
            Ok(FeatureRow {
                roi_id: rec.id.clone(),
                diagnosis: rec.diagnosis,
                features: extract_features(&raster, &inst, &config.features)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    FeatureTable { rows }.write(&out)?;
    println!("wrote features of {} ROIs to {}", records.len(), out.display());
    Ok(())
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    s.parse().map_err(CliError::Usage)
}

/// Feature table joined with the manifest (when present), restricted to the
/// requested levels.
pub fn load_dataset(
    features: &Path,
    root: &Path,
    levels: &[Level],
    include_duct_count: bool,
) -> Result<Dataset, CliError> {
    let table = FeatureTable::read(features)?;
    let manifest = if manifest_path(root).exists() {
        Some(load_manifest(root)?)
    } else {
        None
    };
    let ds = Dataset::from_table(&table, manifest.as_deref(), include_duct_count);
    if levels.is_empty() || Level::ALL.iter().all(|l| levels.contains(l)) {
        return Ok(ds);
    }
    let mut cols = select_columns(levels, &[BlockKind::Histogram, BlockKind::Cooccurrence]);
    if include_duct_count {
        cols.push(ds.n_features() - 1);
    }
    Ok(ds.select_columns(&cols))
}

fn apply_learn_args(config: &mut PipelineConfig, args: &LearnArgs) -> Result<(Task, Dataset), CliError> {
    if let Some(t) = args.trees {
        config.learn.forest.n_trees = t;
    }
    if let Some(d) = args.max_depth {
        config.learn.forest.max_depth = Some(d);
    }
    if let Some(k) = args.pca_k {
        config.learn.pca_k = k;
    }
    if args.include_duct_count {
        config.features.include_duct_count = true;
    }
    config.validate()?;
    let task = parse_task(&args.task)?;
    let root = args.data.clone().unwrap_or_else(|| config.paths.data.clone());
    let features = args.features.clone().unwrap_or_else(|| config.paths.features.clone());
    let levels: Vec<Level> = args.levels.iter().map(|&l| l.into()).collect();
    let ds = load_dataset(&features, &root, &levels, config.features.include_duct_count)?;
    Ok((task, ds))
}

pub fn train(mut config: PipelineConfig, args: TrainArgs) -> Result<(), CliError> {
    let (task, ds) = apply_learn_args(&mut config, &args.learn)?;
    let out = args.out.unwrap_or(config.paths.model);
    let model = ModelFile::train(&ds, &task, &config.learn, config.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.write(&out)?;
    println!(
        "trained {} on {} features to {}",
        task.name(),
        model.feature_names.len(),
        out.display()
    );
    Ok(())
}

pub fn eval(mut config: PipelineConfig, args: EvalArgs) -> Result<(), CliError> {
    if let Some(r) = args.repeats {
        config.repeats = r;
    }
    let (task, ds) = apply_learn_args(&mut config, &args.learn)?;
    let out = args.out.unwrap_or(config.paths.report);
    let report = match &task {
        Task::FourWay => run_split_eval(&ds, &config.learn, config.repeats, config.seed)?,
        Task::Binary(spec) => run_loocv(&ds, spec, &config.learn, config.repeats, config.seed)?,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&out, report.to_json()).map_err(|e| io_err(&out, e))?;
    let summary: Vec<String> = report
        .summary
        .iter()
        .map(|(k, v)| format!("{k} {:.4} ± {:.4}", v.mean, v.std))
        .collect();
    println!("{}: {}", task.name(), summary.join(", "));
    Ok(())
}

fn in_split(s: &Sample, split: SplitArg) -> bool {
    match split {
        SplitArg::All => true,
        SplitArg::Train => s.split == Split::Train,
        SplitArg::Val => s.split == Split::Val,
        SplitArg::Test => s.split == Split::Test,
    }
}

pub fn explain(config: PipelineConfig, args: ExplainArgs) -> Result<(), CliError> {
    config.validate()?;
    let root = args.data.unwrap_or(config.paths.data);
    let features = args.features.unwrap_or(config.paths.features);
    let model_path = args.model.unwrap_or(config.paths.model);
    let out = args.out.unwrap_or(config.paths.explanation);
    if args.background == 0 {
        return Err(CliError::Usage("--background must be at least 1".into()));
    }
    let model = ModelFile::read(&model_path)?;
    let task = parse_task(&model.task)?;
    let with_count = model.feature_names.last().is_some_and(|n| n == "duct_count");
    let full = load_dataset(&features, &root, &[], with_count)?;
    let cols = model
        .feature_names
        .iter()
        .map(|n| {
            full.feature_names
                .iter()
                .position(|f| f == n)
                .ok_or_else(|| CliError::Config(format!("feature {n:?} of the model is not in the table")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ds = full.select_columns(&cols);
    let covered = |s: &&Sample| s.diagnosis.is_some_and(|d| task.class_of(d).is_some());
    let trained_on = |s: &&Sample| match task {
        Task::FourWay => s.split == Split::Train,
        Task::Binary(_) => true,
    };
    let train_rows: Vec<Vec<f64>> = ds
        .samples
        .iter()
        .filter(covered)
        .filter(trained_on)
        .map(|s| s.features.clone())
        .collect();
    let targets: Vec<&Sample> = ds
        .samples
        .iter()
        .filter(covered)
        .filter(|s| in_split(s, args.split))
        .collect();
    if train_rows.is_empty() || targets.is_empty() {
        return Err(CliError::Config("no ROIs to explain or to draw a background from".into()));
    }
    let class = match &args.class {
        Some(name) => Some(
            model
                .classes
                .iter()
                .position(|c| c.eq_ignore_ascii_case(name))
                .ok_or_else(|| CliError::Usage(format!("unknown class {name:?} (one of {:?})", model.classes)))?,
        ),
        None => None,
    };
    let mut rows: Vec<Vec<f64>> = targets.iter().map(|s| s.features.clone()).collect();
    let mut background = sample_background(&train_rows, args.background, config.seed);
    let mut names = model.feature_names.clone();
    if let Some(pca) = &model.model.pca {
        log::warn!("model reduces features with PCA; attributions refer to principal components");
        rows = pca.transform(&rows)?;
        background = pca.transform(&background)?;
        names = (1..=pca.k()).map(|i| format!("PC{i}")).collect();
    }
    let ids: Vec<String> = targets.iter().map(|s| s.id.clone()).collect();
    let report = ShapReport::build(&model.model.forest, &ids, &rows, &background, &names, &model.classes, class)?;
    write_json(&report, &out)?;
    print!("{}", report.top_k_table(args.top_k));
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchReport {
    size: usize,
    ducts: usize,
    instances: usize,
    seconds: Vec<f64>,
    median_seconds: f64,
}

pub fn bench(config: PipelineConfig, args: BenchArgs) -> Result<(), CliError> {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let roi = benchmark_roi(args.size, args.ducts, config.seed)?;
    let inst = derive_instances(&roi.raster, Some(&roi.boxes), &DeriveConfig::default())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let mut seconds = Vec::with_capacity(args.runs);
    for _ in 0..args.runs {
        let t = Instant::now();
        pool.install(|| extract_features(&roi.raster, &inst, &config.features))?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let median_seconds = sorted[sorted.len() / 2];
    let report = BenchReport {
        size: args.size,
        ducts: args.ducts,
        instances: inst.len(),
        seconds,
        median_seconds,
    };
    println!("{}", serde_json::to_string(&report)?);
    match args.max_seconds {
        Some(limit) if median_seconds > limit => Err(CliError::TooSlow {
            median: median_seconds,
            limit,
        }),
        _ => Ok(()),
    }
}

pub fn serve(config: PipelineConfig, args: ServeArgs) -> Result<(), CliError> {
    config.validate()?;
    let root = args.data.unwrap_or(config.paths.data);
    let state = crate::serve::AppState::load(&root, config.derive, config.features)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .map_err(|e| CliError::Io(format!("{}: {e}", args.addr)))?;
        println!("listening on http://{}", args.addr);
        axum::serve(listener, crate::serve::router(state))
            .await
            .map_err(|e| CliError::Io(e.to_string()))
    })
}
