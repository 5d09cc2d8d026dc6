use std::fs;
use std::path::Path;
use std::process::Command;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use diop::features::FeatureConfig;
use diop::instances::{DeriveConfig, DeriveMethod};
use diop::raster::{binarize, read_boxes, read_label_raster, BoxDocument, BoxEntry, LabelSet};
use diop::synth::{generate_dataset, SynthConfig};
use diop_cli::commands::load_manifest;
use diop_cli::serve::{router, AppState, PREVIEW_MAX};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn dataset(dir: &Path) {
    let cfg = SynthConfig {
        counts: [2, 2, 2, 2],
        seed: 11,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir).unwrap();
}

fn app(dir: &Path) -> Router {
    router(AppState::load(dir, DeriveConfig::default(), FeatureConfig::default()).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn stored_boxes(dir: &Path, id: &str) -> Vec<BoxEntry> {
    read_boxes(dir.join(format!("boxes/{id}.json"))).unwrap().boxes
}

fn cli_counts(dir: &Path, method: &str) -> Vec<(String, usize)> {
    let out = Command::new(env!("CARGO_BIN_EXE_diop"))
        .args(["derive", "--data", ".", "--method", method, "--out", method])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Vec<Value> = serde_json::from_str(&fs::read_to_string(dir.join(method).join("summary.json")).unwrap()).unwrap();
    summary
        .iter()
        .map(|v| (v["id"].as_str().unwrap().to_string(), v["instances"].as_u64().unwrap() as usize))
        .collect()
}

#[tokio::test]
async fn health_reports_version() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let (status, v) = call(&app(dir.path()), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["rois"], 8);
}

#[tokio::test]
async fn empty_box_list_derives_nothing() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let body = json!({"roi": "atypia_000", "boxes": []}).to_string();
    let (status, v) = call(&app(dir.path()), "POST", "/derive", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["count"], 0);
    let p = &v["preview"];
    assert!(p["width"].as_u64().unwrap() as usize <= PREVIEW_MAX);
    assert!(p["height"].as_u64().unwrap() as usize <= PREVIEW_MAX);
    assert!(p["cells"].as_array().unwrap().iter().all(|c| c == 0));
}

#[tokio::test]
async fn derive_counts_match_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let app = app(d);
    for method in ["weak", "cc"] {
        for (id, expected) in cli_counts(d, method) {
            let body = json!({"roi": id, "boxes": stored_boxes(d, &id), "method": method}).to_string();
            let (status, v) = call(&app, "POST", "/derive", Some(body)).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(v["count"].as_u64().unwrap() as usize, expected, "{method} {id}");
            assert_eq!(v["instances"].as_array().unwrap().len(), expected);
            let ids: std::collections::BTreeSet<u64> = v["preview"]["cells"]
                .as_array()
                .unwrap()
                .iter()
                .map(|c| c.as_u64().unwrap())
                .collect();
            assert!(ids.iter().all(|&i| i as usize <= expected));
        }
    }
}

#[tokio::test]
async fn responses_are_deterministic_under_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    let body = json!({"roi": "dcis_000", "boxes": stored_boxes(dir.path(), "dcis_000"), "policy": "nearest-center"}).to_string();
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let (app, body) = (app.clone(), body.clone());
            tokio::spawn(async move { call(&app, "POST", "/derive", Some(body)).await })
        })
        .collect();
    let mut replies = Vec::new();
    for h in handles {
        replies.push(h.await.unwrap());
    }
    assert!(replies.iter().all(|r| r == &replies[0]));
    assert_eq!(replies[0].1["policy"], "nearest-center");
}

#[tokio::test]
async fn features_cover_every_derived_duct() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    let boxes = stored_boxes(dir.path(), "invasive_001");
    let body = json!({"roi": "invasive_001", "boxes": boxes}).to_string();
    let (status, v) = call(&app, "POST", "/features", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let (_, derived) = call(&app, "POST", "/derive", Some(body)).await;
    let ducts = v["ducts"].as_array().unwrap();
    assert_eq!(ducts.len() as u64, derived["count"].as_u64().unwrap());
    assert_eq!(v["box_names"].as_array().unwrap().len(), 53);
    assert_eq!(v["mask_names"][0], "BG freq in duct mask");
    for duct in ducts {
        for key in ["box_features", "mask_features"] {
            let values: Vec<f64> = duct[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert_eq!(values.len(), 53);
            assert!((values[..8].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[tokio::test]
async fn mask_preview_matches_the_foreground() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let (status, v) = call(&app(dir.path()), "GET", "/mask?roi=benign_001", None).await;
    assert_eq!(status, StatusCode::OK);
    let raster = read_label_raster(dir.path().join("rasters/benign_001.pgm")).unwrap();
    let mask = binarize(&raster, LabelSet::default());
    assert_eq!(v["foreground"].as_u64().unwrap() as usize, mask.count());
    assert_eq!(v["preview"]["width"], 128);
    assert_eq!(v["preview"]["scale"], 4);
    let cells = v["preview"]["cells"].as_array().unwrap();
    assert_eq!(cells[0].as_u64().unwrap(), mask.get(2, 2) as u64);
}

#[tokio::test]
async fn malformed_requests_get_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let app = app(dir.path());
    for (method, uri, body, status) in [
        ("POST", "/derive", Some("{not json".to_string()), StatusCode::BAD_REQUEST),
        ("POST", "/derive", Some(json!({"roi": "dcis_000"}).to_string()), StatusCode::BAD_REQUEST),
        (
            "POST",
            "/derive",
            Some(json!({"roi": "dcis_000", "boxes": [], "extra": 1}).to_string()),
            StatusCode::BAD_REQUEST,
        ),
        (
            "POST",
            "/derive",
            Some(json!({"roi": "dcis_000", "boxes": [], "policy": "largest"}).to_string()),
            StatusCode::BAD_REQUEST,
        ),
        ("POST", "/features", Some(json!({"roi": "nope", "boxes": []}).to_string()), StatusCode::NOT_FOUND),
        ("GET", "/mask", None, StatusCode::BAD_REQUEST),
        ("GET", "/mask?roi=nope", None, StatusCode::NOT_FOUND),
        ("GET", "/boxes?roi=nope", None, StatusCode::NOT_FOUND),
    ] {
        let (got, v) = call(&app, method, uri, body).await;
        assert_eq!(got, status, "{method} {uri}");
        assert!(v["error"]["kind"].is_string(), "{method} {uri}: {v}");
        assert!(v["error"]["message"].is_string());
    }
}

#[tokio::test]
async fn boxes_round_trip_and_rasters_stay_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let app = app(d);
    let rasters: Vec<(String, Vec<u8>)> = load_manifest(d)
        .unwrap()
        .iter()
        .map(|r| (r.raster.clone(), fs::read(d.join(&r.raster)).unwrap()))
        .collect();

    let (status, v) = call(&app, "GET", "/boxes?roi=benign_000", None).await;
    assert_eq!(status, StatusCode::OK);
    let stored: BoxDocument = serde_json::from_value(v).unwrap();
    assert_eq!(stored, read_boxes(d.join("boxes/benign_000.json")).unwrap());

    let doc = BoxDocument {
        image: "benign_000".into(),
        boxes: (0..5)
            .map(|i| BoxEntry {
                x: 10 + 40 * i,
                y: 5 * i,
                w: 30,
                h: 20 + i,
            })
            .collect(),
    };
    let (status, v) = call(&app, "PUT", "/boxes?roi=benign_000", Some(serde_json::to_string(&doc).unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["saved"], 5);
    let (_, v) = call(&app, "GET", "/boxes?roi=benign_000", None).await;
    assert_eq!(serde_json::from_value::<BoxDocument>(v).unwrap(), doc);
    assert_eq!(fs::read_to_string(d.join("boxes/benign_000.json")).unwrap(), doc.to_json());

    let wrong = BoxDocument {
        image: "dcis_000".into(),
        boxes: vec![],
    };
    let (status, _) = call(&app, "PUT", "/boxes?roi=benign_000", Some(serde_json::to_string(&wrong).unwrap())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let body = json!({"roi": "benign_000", "boxes": doc.boxes, "method": "weak"}).to_string();
    let (status, _) = call(&app, "POST", "/derive", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    for (path, bytes) in rasters {
        assert_eq!(fs::read(d.join(&path)).unwrap(), bytes, "{path} changed");
    }
    assert_eq!(DeriveConfig::default().method, DeriveMethod::Weak);
}
