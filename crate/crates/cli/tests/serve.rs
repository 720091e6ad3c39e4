mod common;

use axum::http::StatusCode;
use base64::Engine;
use common::*;
use ctrlcap::harness::{caption_region, EvalConfig};
use ctrlcap::model::{CaptionModel, ModelConfig};
use ctrlcap::synthworld::{build_dataset, render, DatasetConfig, DatasetManifest};
use ctrlcap_cli::serve::{decode_png, encode_png, CaptionResponse, SceneMetadata, ScenePage};
use serde_json::json;

fn setup() -> (CaptionModel, DatasetManifest) {
    let cfg = DatasetConfig {
        train_samples: 40,
        val_samples: 10,
        test_samples: 30,
        ..DatasetConfig::default()
    };
    let manifest = build_dataset(&cfg, 1).unwrap();
    let model = CaptionModel::new(
        ModelConfig {
            max_len: 8,
            ..ModelConfig::default()
        },
        3,
    )
    .unwrap();
    (model, manifest)
}

#[test]
fn http_captions_match_the_offline_harness() {
    let (model, manifest) = setup();
    let fx = fixtures(&model, &manifest, 20);
    let (same, diffs) = compare_with_harness(&model, &manifest, &fx);
    assert_eq!(same, 20, "{diffs:?}");
}

#[test]
fn malformed_requests_get_their_status_codes() {
    let (model, manifest) = setup();
    let (_, failures) = check_error_codes(&model, &manifest);
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn response_carries_tags_controls_and_version() {
    let (model, manifest) = setup();
    let router = app(Some(model), Some(manifest.clone()));
    let scene = manifest.scene_ids()[0];
    let rt = runtime();
    let body = json!({"scene_id": scene, "box": [0, 0, 48, 48], "control_words": ["QWERTY"], "tag_threshold": 0.0, "beam_size": 1});
    let (status, bytes) = rt.block_on(post_json(&router, "/v1/caption", &body));
    assert_eq!(status, StatusCode::OK);
    let resp: CaptionResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.used_controls, vec!["QWERTY".to_string()]);
    assert_eq!(resp.model_version, "test-model");
    // Threshold 0 keeps every class word of both roles.
    assert!(!resp.self_tags.is_empty());
    assert_eq!(resp.controlled, resp.caption.split(' ').any(|t| t == "QWERTY"));
}

#[test]
fn inline_png_matches_the_decoded_canvas() {
    let (model, manifest) = setup();
    let scene = manifest.scene_ids()[0];
    let canvas = render(&manifest.scene(scene).unwrap());
    let png = encode_png(&canvas);
    let decoded = decode_png(&png).unwrap();
    assert_eq!(decoded.to_rgba8(), canvas.to_rgba8());
    let bbox = ctrlcap::synthworld::BBox::new(8, 8, 40, 32);
    let opts = EvalConfig::default().inference_options(&model.config);
    let offline = caption_region(&model, &decoded, bbox, &[], &opts).unwrap().text();

    let router = app(Some(model), None);
    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
    let rt = runtime();
    let (status, bytes) = rt.block_on(post_json(&router, "/v1/caption", &json!({"image_png_base64": b64, "box": [8, 8, 40, 32]})));
    assert_eq!(status, StatusCode::OK);
    let resp: CaptionResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.caption, offline);

    let small = base64::engine::general_purpose::STANDARD.encode(encode_png(&ctrlcap::image::Image::filled(10, 10, 0.5)));
    let (status, _) = rt.block_on(post_json(&router, "/v1/caption", &json!({"image_png_base64": small, "box": [0, 0, 5, 5]})));
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn scene_listing_and_metadata() {
    let (model, manifest) = setup();
    let router = app(Some(model), Some(manifest.clone()));
    let rt = runtime();
    let ids = manifest.scene_ids();

    let (status, bytes) = rt.block_on(call(&router, "GET", "/v1/scenes?offset=0&limit=7", None));
    assert_eq!(status, StatusCode::OK);
    let page: ScenePage = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(page.ids, ids[..7].to_vec());
    assert_eq!(page.total, ids.len());
    assert_eq!(page.next_offset, Some(7));
    let last = format!("/v1/scenes?offset={}&limit=1000", ids.len() - 2);
    let page: ScenePage = serde_json::from_slice(&rt.block_on(call(&router, "GET", &last, None)).1).unwrap();
    assert_eq!(page.ids.len(), 2);
    assert_eq!(page.next_offset, None);

    let (status, bytes) = rt.block_on(call(&router, "GET", &format!("/v1/scene/{}", ids[0]), None));
    assert_eq!(status, StatusCode::OK);
    let meta: SceneMetadata = serde_json::from_slice(&bytes).unwrap();
    assert_eq!((meta.width, meta.height), (96, 96));
    assert!(meta.objects.is_some_and(|o| !o.is_empty()));
    assert!(meta.regions.is_some_and(|r| !r.is_empty()));

    let (status, png) = rt.block_on(call(&router, "GET", &format!("/v1/scene/{}/image.png", ids[0]), None));
    assert_eq!(status, StatusCode::OK);
    let img = decode_png(&png).unwrap();
    let inline = base64::engine::general_purpose::STANDARD.decode(meta.image_png_base64).unwrap();
    assert_eq!(png, inline);
    assert_eq!((img.width, img.height), (96, 96));
}

#[test]
fn hints_can_be_switched_off() {
    let (_, manifest) = setup();
    let state = ctrlcap_cli::serve::AppState::new(
        None,
        Some(manifest.clone()),
        ctrlcap_cli::serve::ServeOptions {
            hints: false,
            ..Default::default()
        },
    );
    let router = ctrlcap_cli::serve::router(state);
    let rt = runtime();
    let (status, bytes) = rt.block_on(call(&router, "GET", &format!("/v1/scene/{}", manifest.scene_ids()[0]), None));
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert!(v.get("objects").is_none() && v.get("regions").is_none());
}
