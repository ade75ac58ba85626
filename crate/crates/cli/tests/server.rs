// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use image::RgbImage;
use patchlens::config::ServiceConfig;
use patchlens::server::{router, AppState};
use patchlens_core::mm::encode_png;
use patchlens_core::mm::scene::Scene;
use patchlens_core::toy::ColorWorld;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn state(config: ServiceConfig) -> Arc<AppState> {
    Arc::new(AppState::new(config).unwrap())
}

fn scene_b64(pairs: &[(&str, &str)]) -> String {
    let world = ColorWorld::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = Scene::sample(world.vision.grid, world.vision.patch_size, pairs, &mut rng).unwrap();
    base64::engine::general_purpose::STANDARD.encode(encode_png(&scene.render()).unwrap())
}

async fn send(
    state: &Arc<AppState>,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>, Option<String>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = router(state.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_owned());
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn send_json(
    state: &Arc<AppState>,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (s, b, _) = send(state, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn analyze_body() -> Value {
    json!({
        "question": "What is the color of the dog?",
        "image_base64": scene_b64(&[("dog", "red"), ("cat", "blue")]),
        "options": { "deterministic": true }
    })
}

#[tokio::test]
async fn analyze_then_probe_and_fetch_heatmaps() {
    let st = state(ServiceConfig::default());
    let (s, v) = send_json(&st, "POST", "/analyze", Some(analyze_body())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["schema"], "analyze-response-v1");
    assert_eq!(v["predicted"]["token"], "red");
    assert_eq!(v["passes"]["traced"], 1);
    assert!(v.get("timing").is_none() || v["timing"].is_null());
    let session = v["session"].as_str().unwrap().to_owned();
    assert_eq!(v["maps"]["logprob"]["scores"].as_array().unwrap().len(), 64);

    let entry = st.registry.get("toy-color").unwrap().unwrap();
    let passes = (entry.handle.traced_passes(), entry.handle.plain_passes());

    let probe = json!({ "session": session, "probe": { "kind": "project", "at": { "cell": [2, 2] }, "vector": { "source": "layer-input", "layer": 1 }, "top_k": 3 } });
    let (s, p) = send_json(&st, "POST", "/probe", Some(probe)).await;
    assert_eq!(s, StatusCode::OK, "{p}");
    assert_eq!(p["passes"], 0);
    assert_eq!(p["result"]["kind"], "project");
    let probe = json!({ "session": session, "probe": { "kind": "retarget", "target": "blue" } });
    let (s, p) = send_json(&st, "POST", "/probe", Some(probe)).await;
    assert_eq!(s, StatusCode::OK, "{p}");
    assert_eq!(p["result"]["target"]["token"], "blue");
    assert_eq!(
        (entry.handle.traced_passes(), entry.handle.plain_passes()),
        passes
    );

    for uri in [
        v["heatmaps"]["image"].as_str().unwrap().to_owned(),
        v["heatmaps"]["logprob"].as_str().unwrap().to_owned(),
        format!(
            "{}?scale=shared",
            v["heatmaps"]["avg_attention"].as_str().unwrap()
        ),
    ] {
        let (s, bytes, ctype) = send(&st, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK, "{uri}");
        assert_eq!(ctype.as_deref(), Some("image/png"));
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (112, 112));
    }
    let (s, _) = send_json(
        &st,
        "GET",
        &format!("/sessions/{session}/heatmap/nope.png"),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, e) = send_json(
        &st,
        "GET",
        &format!("/sessions/{session}/heatmap/logprob.png?scale=weird"),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["field"], "scale");
}

#[tokio::test]
async fn textual_analyze_has_no_heatmaps() {
    let st = state(ServiceConfig::default());
    let body = json!({ "question": "What is the color of the fox?", "context": "Fox is orange." });
    let (s, v) = send_json(&st, "POST", "/analyze", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["predicted"]["token"], "orange");
    assert!(v["heatmaps"].is_null());
    assert!(v["timing"]["trace_ms"].is_number());
}

#[tokio::test]
async fn malformed_requests_are_400_with_field() {
    let st = state(ServiceConfig::default());
    let (s, e) = send_json(
        &st,
        "POST",
        "/analyze",
        Some(json!({ "image_base64": scene_b64(&[("dog", "red")]) })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["field"], "question");
    let (s, e) = send_json(
        &st,
        "POST",
        "/analyze",
        Some(json!({ "question": "", "context": "Dog is red." })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["field"], "question");
    let (s, e) = send_json(
        &st,
        "POST",
        "/analyze",
        Some(json!({ "question": "What?", "bogus": 1 })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["field"], "bogus");
    let (s, e) = send_json(
        &st,
        "POST",
        "/analyze",
        Some(json!({ "question": "What?", "image_base64": "@@@" })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["field"], "image_base64");
    let (s, b, _) = send(&st, "POST", "/analyze", None).await;
    assert_eq!(
        s,
        StatusCode::BAD_REQUEST,
        "{}",
        String::from_utf8_lossy(&b)
    );
}

#[tokio::test]
async fn unknown_model_is_404_and_bad_image_is_422() {
    let st = state(ServiceConfig::default());
    let (s, e) = send_json(
        &st,
        "POST",
        "/analyze",
        Some(json!({ "question": "What?", "model": "nope" })),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{e}");
    assert_eq!(e["error"]["field"], "model");
    let junk = base64::engine::general_purpose::STANDARD.encode(b"definitely not a png");
    let (s, e) = send_json(
        &st,
        "POST",
        "/analyze",
        Some(json!({ "question": "What is the color of the dog?", "image_base64": junk })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{e}");
    let tiny =
        base64::engine::general_purpose::STANDARD.encode(encode_png(&RgbImage::new(3, 3)).unwrap());
    let (s, _) = send_json(
        &st,
        "POST",
        "/analyze",
        Some(json!({ "question": "What is the color of the dog?", "image_base64": tiny })),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn sessions_unknown_expired_and_evicted() {
    let st = state(ServiceConfig {
        session_ttl_secs: 0,
        ..ServiceConfig::default()
    });
    let (s, _) = send_json(
        &st,
        "POST",
        "/probe",
        Some(json!({ "session": "missing", "probe": { "kind": "retarget", "target": "red" } })),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, v) = send_json(&st, "POST", "/analyze", Some(analyze_body())).await;
    let session = v["session"].as_str().unwrap().to_owned();
    tokio::time::sleep(Duration::from_millis(20)).await;
    let (s, e) = send_json(
        &st,
        "POST",
        "/probe",
        Some(json!({ "session": session, "probe": { "kind": "retarget", "target": "red" } })),
    )
    .await;
    assert_eq!(s, StatusCode::GONE, "{e}");

    let st = state(ServiceConfig {
        cache_capacity: 2,
        ..ServiceConfig::default()
    });
    let mut ids = Vec::new();
    for _ in 0..3 {
        let (_, v) = send_json(&st, "POST", "/analyze", Some(analyze_body())).await;
        ids.push(v["session"].as_str().unwrap().to_owned());
    }
    assert_eq!(st.sessions.len(), 2);
    let (s, _) = send_json(&st, "GET", &format!("/sessions/{}/image.png", ids[0]), None).await;
    assert_eq!(s, StatusCode::GONE);
    let (s, _, _) = send(&st, "GET", &format!("/sessions/{}/image.png", ids[2]), None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn saturated_queue_is_503() {
    let st = state(ServiceConfig {
        max_pending: 1,
        ..ServiceConfig::default()
    });
    let entry = st.registry.get("toy-color").unwrap().unwrap();
    let (hold_tx, hold_rx) = std::sync::mpsc::channel::<()>();
    let (ready_tx, ready_rx) = std::sync::mpsc::channel::<()>();
    let holder = {
        let entry = entry.clone();
        std::thread::spawn(move || {
            entry
                .handle
                .queue()
                .run(|| {
                    ready_tx.send(()).unwrap();
                    hold_rx.recv().unwrap();
                })
                .unwrap();
        })
    };
    ready_rx.recv().unwrap();
    let (s, e) = send_json(&st, "POST", "/analyze", Some(analyze_body())).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{e}");
    hold_tx.send(()).unwrap();
    holder.join().unwrap();
    let (s, _) = send_json(&st, "POST", "/analyze", Some(analyze_body())).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn models_and_health() {
    let st = state(ServiceConfig::default());
    let (s, v) = send_json(&st, "GET", "/health", None).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));
    let (s, v) = send_json(&st, "GET", "/models", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["default"], "toy-color");
    assert!(v["models"]
        .as_array()
        .unwrap()
        .iter()
        .any(|m| m == "toy-color-24x24"));
}
