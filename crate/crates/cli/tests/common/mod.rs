//! Shared helpers for driving the HTTP router in-process.
#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use ctrlcap::controlparse::first_noun;
use ctrlcap::harness::{caption_region, EvalConfig};
use ctrlcap::model::CaptionModel;
use ctrlcap::synthworld::{render, BBox, DatasetManifest, Split};
use ctrlcap_cli::serve::{self, AppState, CaptionResponse, ServeOptions};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn post_json(app: &Router, uri: &str, body: &Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", uri, Some(serde_json::to_vec(body).unwrap())).await
}

/// One captioning request: scene, box and control words.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub scene_id: u64,
    pub bbox: BBox,
    pub controls: Vec<String>,
}

/// `n` fixtures over the test split, cycling through no controls, the
/// first noun, every gold tag, an out-of-vocabulary word and a colour.
pub fn fixtures(model: &CaptionModel, manifest: &DatasetManifest, n: usize) -> Vec<Fixture> {
    let samples = manifest.split(Split::Test);
    (0..n)
        .map(|k| {
            let s = &samples[(k * 7) % samples.len()];
            let controls = match k % 5 {
                0 => Vec::new(),
                1 => first_noun(&s.caption, &model.class_set).into_iter().collect(),
                2 => s.gold_tags_in_caption_order(),
                3 => vec!["ZORBLAX".to_string()],
                _ => vec!["green".to_string()],
            };
            Fixture {
                scene_id: s.scene_id,
                bbox: s.bbox,
                controls,
            }
        })
        .collect()
}

pub fn request(f: &Fixture) -> Value {
    json!({
        "scene_id": f.scene_id,
        "box": <[u32; 4]>::from(f.bbox),
        "control_words": f.controls,
    })
}

pub fn app(model: Option<CaptionModel>, manifest: Option<DatasetManifest>) -> Router {
    let model = model.map(|m| (m, "test-model".to_string()));
    serve::router(AppState::new(model, manifest, ServeOptions::default()))
}

/// Captions every fixture offline and over HTTP; returns the number of
/// byte-identical captions and a description of each difference.
pub fn compare_with_harness(model: &CaptionModel, manifest: &DatasetManifest, fixtures: &[Fixture]) -> (usize, Vec<String>) {
    let opts = EvalConfig::default().inference_options(&model.config);
    let router = app(Some(model.clone()), Some(manifest.clone()));
    let rt = runtime();
    let mut same = 0;
    let mut diffs = Vec::new();
    for (k, f) in fixtures.iter().enumerate() {
        let canvas = render(&manifest.scene(f.scene_id).unwrap());
        let offline = caption_region(model, &canvas, f.bbox, &f.controls, &opts).unwrap().text();
        let (status, body) = rt.block_on(post_json(&router, "/v1/caption", &request(f)));
        if status != StatusCode::OK {
            diffs.push(format!("fixture {k}: HTTP {status}"));
            continue;
        }
        let resp: CaptionResponse = serde_json::from_slice(&body).unwrap();
        if resp.caption.as_bytes() == offline.as_bytes() {
            same += 1;
        } else {
            diffs.push(format!("fixture {k}: {:?} vs {:?}", resp.caption, offline));
        }
    }
    (same, diffs)
}

/// Malformed or unserviceable requests with their expected status codes.
pub fn error_cases(scene: u64) -> Vec<(&'static str, &'static str, &'static str, Option<Vec<u8>>, u16)> {
    let body = |v: Value| Some(serde_json::to_vec(&v).unwrap());
    vec![
        ("malformed JSON", "POST", "/v1/caption", Some(b"{\"box\": [1,2".to_vec()), 400),
        ("missing box", "POST", "/v1/caption", body(json!({"scene_id": scene})), 400),
        ("negative box", "POST", "/v1/caption", body(json!({"scene_id": scene, "box": [-1, 0, 10, 10]})), 400),
        ("zero-width box", "POST", "/v1/caption", body(json!({"scene_id": scene, "box": [0, 0, 0, 10]})), 400),
        ("box past the image", "POST", "/v1/caption", body(json!({"scene_id": scene, "box": [90, 90, 20, 20]})), 400),
        ("box below one patch", "POST", "/v1/caption", body(json!({"scene_id": scene, "box": [10, 10, 3, 3]})), 400),
        (
            "too many controls",
            "POST",
            "/v1/caption",
            body(json!({"scene_id": scene, "box": [0, 0, 20, 20], "control_words": vec!["a"; 9]})),
            400,
        ),
        (
            "multi-word control",
            "POST",
            "/v1/caption",
            body(json!({"scene_id": scene, "box": [0, 0, 20, 20], "control_words": ["red circle"]})),
            400,
        ),
        (
            "threshold out of range",
            "POST",
            "/v1/caption",
            body(json!({"scene_id": scene, "box": [0, 0, 20, 20], "tag_threshold": 1.5})),
            400,
        ),
        ("zero beam", "POST", "/v1/caption", body(json!({"scene_id": scene, "box": [0, 0, 20, 20], "beam_size": 0})), 400),
        ("no image source", "POST", "/v1/caption", body(json!({"box": [0, 0, 20, 20]})), 400),
        (
            "bad base64",
            "POST",
            "/v1/caption",
            body(json!({"image_png_base64": "!!!", "box": [0, 0, 20, 20]})),
            400,
        ),
        ("unknown scene", "POST", "/v1/caption", body(json!({"scene_id": 987654321u64, "box": [0, 0, 20, 20]})), 404),
        ("non-numeric scene id", "GET", "/v1/scene/abc", None, 400),
        ("unknown scene metadata", "GET", "/v1/scene/987654321", None, 404),
        ("unknown scene image", "GET", "/v1/scene/987654321/image.png", None, 404),
        ("zero page limit", "GET", "/v1/scenes?limit=0", None, 400),
    ]
}

/// Runs every error case plus the no-model case; returns failures.
pub fn check_error_codes(model: &CaptionModel, manifest: &DatasetManifest) -> (usize, Vec<String>) {
    let scene = manifest.split(Split::Test)[0].scene_id;
    let router = app(Some(model.clone()), Some(manifest.clone()));
    let bare = app(None, Some(manifest.clone()));
    let rt = runtime();
    let mut cases = error_cases(scene);
    let ok = format!("{{\"scene_id\": {scene}, \"box\": [0, 0, 20, 20]}}").into_bytes();
    cases.push(("no model loaded", "POST", "/v1/caption", Some(ok), 503));
    let total = cases.len();
    let mut failures = Vec::new();
    for (k, (name, method, uri, body, want)) in cases.into_iter().enumerate() {
        let target = if k + 1 == total { &bare } else { &router };
        let (status, bytes) = rt.block_on(call(target, method, uri, body));
        let has_error = serde_json::from_slice::<Value>(&bytes).is_ok_and(|v| v["error"].is_string());
        if status.as_u16() != want || !has_error {
            failures.push(format!("{name}: got {status}, want {want}"));
        }
    }
    (total, failures)
}
