//! Local HTTP service backing the annotation tool.
//!
//! | route | method | body / query | reply |
//! |---|---|---|---|
//! | `/health` | GET | | status and version |
//! | `/derive` | POST | `{roi, boxes, method?, policy?}` | instance summary and preview grid |
//! | `/features` | POST | `{roi, boxes, policy?}` | per-duct box and mask feature vectors |
//! | `/mask` | GET | `?roi=` | foreground preview grid |
//! | `/boxes` | GET, PUT | `?roi=`, box document | stored box document |
//!
//! Errors come back as `{"error": {"kind", "message"}}` with a 4xx status for
//! bad requests and 5xx for processing failures. Rasters are loaded once and
//! never written; `PUT /boxes` is the only write and is serialized per ROI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use diop::features::{duct_features, feature_names, FeatureConfig, Level};
use diop::instances::{derive_instances, AssignmentPolicy, DeriveConfig, DeriveMethod, InstanceInfo, InstanceMap};
use diop::raster::{
    binarize, read_boxes, read_label_raster, write_boxes, BoxDocument, BoxEntry, LabelRaster, RasterError, RoiRecord,
};
use serde::{Deserialize, Serialize};

use crate::commands::load_manifest;
use crate::CliError;

/// Longest side of a preview grid.
pub const PREVIEW_MAX: usize = 128;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request",
            message: message.into(),
        }
    }

    fn not_found(roi: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            message: format!("unknown ROI {roi:?}"),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: &'a str,
        }
        #[derive(Serialize)]
        struct Envelope<'a> {
            error: Body<'a>,
        }
        let body = Envelope {
            error: Body {
                kind: self.kind,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

struct Roi {
    record: RoiRecord,
    raster: OnceLock<Arc<LabelRaster>>,
    save_lock: tokio::sync::Mutex<()>,
}

struct Inner {
    root: PathBuf,
    rois: BTreeMap<String, Roi>,
    derive: DeriveConfig,
    features: FeatureConfig,
}

/// Dataset index shared by every request. Rasters are read lazily, once.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn load(root: &Path, derive: DeriveConfig, features: FeatureConfig) -> Result<Self, CliError> {
        let records = load_manifest(root)?;
        Ok(Self::new(root, records, derive, features))
    }

    pub fn new(root: &Path, records: Vec<RoiRecord>, derive: DeriveConfig, features: FeatureConfig) -> Self {
        let rois = records
            .into_iter()
            .map(|record| {
                (
                    record.id.clone(),
                    Roi {
                        record,
                        raster: OnceLock::new(),
                        save_lock: tokio::sync::Mutex::new(()),
                    },
                )
            })
            .collect();
        Self(Arc::new(Inner {
            root: root.to_path_buf(),
            rois,
            derive,
            features,
        }))
    }

    fn roi(&self, id: &str) -> Result<&Roi, ApiError> {
        self.0.rois.get(id).ok_or_else(|| ApiError::not_found(id))
    }

    fn raster(&self, id: &str) -> Result<Arc<LabelRaster>, ApiError> {
        let roi = self.roi(id)?;
        if let Some(r) = roi.raster.get() {
            return Ok(r.clone());
        }
        let loaded = read_label_raster(self.0.root.join(&roi.record.raster))
            .map_err(|e| ApiError::internal(format!("{id}: {e}")))?;
        Ok(roi.raster.get_or_init(|| Arc::new(loaded)).clone())
    }

    fn boxes_path(&self, roi: &Roi) -> PathBuf {
        let rel = roi
            .record
            .boxes
            .clone()
            .unwrap_or_else(|| format!("boxes/{}.json", roi.record.id));
        self.0.root.join(rel)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/derive", post(derive))
        .route("/features", post(features))
        .route("/mask", get(mask))
        .route("/boxes", get(load_boxes).put(save_boxes))
        .with_state(state)
}

/// Downsampled grid of a `width`×`height` image sampled at cell centres.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preview {
    pub width: usize,
    pub height: usize,
    /// Raster pixels per preview cell along each axis.
    pub scale: usize,
    /// Row-major cell values.
    pub cells: Vec<u32>,
}

pub fn preview(width: usize, height: usize, value: impl Fn(usize, usize) -> u32) -> Preview {
    let scale = width.max(height).div_ceil(PREVIEW_MAX).max(1);
    let (pw, ph) = (width.div_ceil(scale), height.div_ceil(scale));
    let mut cells = Vec::with_capacity(pw * ph);
    for py in 0..ph {
        let y = (py * scale + scale / 2).min(height - 1);
        for px in 0..pw {
            let x = (px * scale + scale / 2).min(width - 1);
            cells.push(value(x, y));
        }
    }
    Preview {
        width: pw,
        height: ph,
        scale,
        cells,
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub rois: usize,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        rois: state.0.rois.len(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveRequest {
    pub roi: String,
    pub boxes: Vec<BoxEntry>,
    #[serde(default)]
    pub method: Option<DeriveMethod>,
    #[serde(default)]
    pub policy: Option<AssignmentPolicy>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DeriveResponse {
    pub roi: String,
    pub method: DeriveMethod,
    pub policy: AssignmentPolicy,
    pub count: usize,
    pub instances: Vec<InstanceInfo>,
    pub preview: Preview,
}

fn derive_for(
    state: &AppState,
    roi: &str,
    boxes: &[BoxEntry],
    config: &DeriveConfig,
) -> Result<(Arc<LabelRaster>, InstanceMap), ApiError> {
    let raster = state.raster(roi)?;
    let doc = BoxDocument {
        image: roi.to_string(),
        boxes: boxes.to_vec(),
    };
    let clamped = doc.clamped_boxes(raster.width(), raster.height());
    let map = derive_instances(&raster, Some(&clamped), config).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((raster, map))
}

async fn derive(State(state): State<AppState>, body: Bytes) -> Result<Json<DeriveResponse>, ApiError> {
    let req: DeriveRequest = parse_body(&body)?;
    state.roi(&req.roi)?;
    let mut config = state.0.derive.clone();
    if let Some(m) = req.method {
        config.method = m;
    }
    if let Some(p) = req.policy {
        config.policy = p;
    }
    blocking(move || {
        let (raster, map) = derive_for(&state, &req.roi, &req.boxes, &config)?;
        Ok(Json(DeriveResponse {
            preview: preview(raster.width(), raster.height(), |x, y| map.id_at(x, y)),
            roi: req.roi,
            method: config.method,
            policy: config.policy,
            count: map.len(),
            instances: map.instances().to_vec(),
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesRequest {
    pub roi: String,
    pub boxes: Vec<BoxEntry>,
    #[serde(default)]
    pub policy: Option<AssignmentPolicy>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DuctVector {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: diop::raster::BoundingBox,
    pub area: usize,
    pub box_features: Vec<f64>,
    pub mask_features: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeaturesResponse {
    pub roi: String,
    pub box_names: Vec<String>,
    pub mask_names: Vec<String>,
    pub ducts: Vec<DuctVector>,
}

fn level_names(level: Level) -> Vec<String> {
    feature_names()
        .iter()
        .filter(|n| n.ends_with(&format!(" {}", level.tag())))
        .cloned()
        .collect()
}

async fn features(State(state): State<AppState>, body: Bytes) -> Result<Json<FeaturesResponse>, ApiError> {
    let req: FeaturesRequest = parse_body(&body)?;
    state.roi(&req.roi)?;
    let mut config = state.0.derive.clone();
    config.method = DeriveMethod::Weak;
    if let Some(p) = req.policy {
        config.policy = p;
    }
    let connectivity = state.0.features.connectivity;
    blocking(move || {
        let (raster, map) = derive_for(&state, &req.roi, &req.boxes, &config)?;
        let per_level = |level| duct_features(&raster, &map, level, connectivity).map_err(|e| ApiError::internal(e.to_string()));
        let boxes = per_level(Level::Box)?;
        let masks = per_level(Level::Mask)?;
        let ducts = map
            .instances()
            .iter()
            .zip(boxes.into_iter().zip(masks))
            .map(|(info, (b, m))| DuctVector {
                id: info.id,
                bbox: info.bbox,
                area: info.area,
                box_features: b.values,
                mask_features: m.values,
            })
            .collect();
        Ok(Json(FeaturesResponse {
            roi: req.roi,
            box_names: level_names(Level::Box),
            mask_names: level_names(Level::Mask),
            ducts,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct RoiQuery {
    pub roi: String,
}

fn roi_query(q: Result<Query<RoiQuery>, QueryRejection>) -> Result<String, ApiError> {
    q.map(|Query(q)| q.roi)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResponse {
    pub roi: String,
    pub width: usize,
    pub height: usize,
    pub foreground: usize,
    pub preview: Preview,
}

async fn mask(
    State(state): State<AppState>,
    q: Result<Query<RoiQuery>, QueryRejection>,
) -> Result<Json<MaskResponse>, ApiError> {
    let roi = roi_query(q)?;
    state.roi(&roi)?;
    blocking(move || {
        let raster = state.raster(&roi)?;
        let mask = binarize(&raster, state.0.derive.foreground);
        Ok(Json(MaskResponse {
            width: raster.width(),
            height: raster.height(),
            foreground: mask.count(),
            preview: preview(raster.width(), raster.height(), |x, y| mask.get(x, y) as u32),
            roi,
        }))
    })
    .await
}

async fn load_boxes(
    State(state): State<AppState>,
    q: Result<Query<RoiQuery>, QueryRejection>,
) -> Result<Json<BoxDocument>, ApiError> {
    let id = roi_query(q)?;
    let roi = state.roi(&id)?;
    let _guard = roi.save_lock.lock().await;
    let path = state.boxes_path(roi);
    if !path.exists() {
        return Ok(Json(BoxDocument {
            image: id,
            boxes: Vec::new(),
        }));
    }
    read_boxes(&path)
        .map(Json)
        .map_err(|e| ApiError::internal(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SaveResponse {
    pub roi: String,
    pub saved: usize,
}

async fn save_boxes(
    State(state): State<AppState>,
    q: Result<Query<RoiQuery>, QueryRejection>,
    body: Bytes,
) -> Result<Json<SaveResponse>, ApiError> {
    let id = roi_query(q)?;
    let roi = state.roi(&id)?;
    let doc: BoxDocument = parse_body(&body)?;
    if doc.image != id {
        return Err(ApiError::bad_request(format!(
            "document image {:?} does not match ROI {id:?}",
            doc.image
        )));
    }
    let _guard = roi.save_lock.lock().await;
    let path = state.boxes_path(roi);
    let write = || -> Result<(), RasterError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| RasterError::Io {
                path: parent.display().to_string(),
                source: e,
            })?;
        }
        write_boxes(&doc, &path)
    };
    write().map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(SaveResponse {
        roi: id,
        saved: doc.boxes.len(),
    }))
}
