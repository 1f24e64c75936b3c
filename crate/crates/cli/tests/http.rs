mod common;

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use tpde::editing;
use tpde::imageio;
use tpde::renderer::Camera;
use tpde::scenes::HAIR;
use tpde_cli::server;

fn app(sidecar: Option<std::path::PathBuf>) -> Router {
    server::router(server::start(common::tiny_checkpoint(), sidecar))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn raw_post(app: &Router, uri: &str, body: &'static str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn model_lists_latents_and_classes() {
    let app = app(None);
    let (s, v) = call(&app, "GET", "/api/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["latent_ids"], json!(["scene_0", "scene_1"]));
    assert_eq!(v["classes"].as_array().unwrap().len(), 6);
    assert_eq!(v["latent_dim"], 8);
}

#[tokio::test]
async fn render_errors_map_to_status_codes() {
    let app = app(None);
    let (s, v) = call(&app, "POST", "/api/render", Some(json!({"latent_id": "nobody", "yaw": 0.0, "pitch": 0.0}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nobody"));

    for body in [
        json!({"latent_id": "scene_0", "yaw": 0.0, "pitch": 0.0, "width": 8}),
        json!({"latent_id": "scene_0", "yaw": 0.0, "pitch": 0.0, "height": 1024}),
        json!({"latent_id": "scene_0", "yaw": 0.0, "pitch": 0.0, "outputs": ["normals"]}),
        json!({"yaw": 0.0, "pitch": 0.0}),
        json!({"latent": [0.0, 1.0], "yaw": 0.0, "pitch": 0.0}),
        json!({"latent_id": "scene_0", "yaw": 0.0}),
    ] {
        let (s, v) = call(&app, "POST", "/api/render", Some(body.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
        assert!(v["error"].is_string());
    }
    let (s, v) = raw_post(&app, "/api/render", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn render_is_deterministic_and_decodes() {
    let app = app(None);
    let body = json!({"latent_id": "scene_0", "appearance_latent_id": "scene_1", "yaw": 0.3, "pitch": 0.1, "width": 20, "height": 16});
    let (s, a) = call(&app, "POST", "/api/render", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&app, "POST", "/api/render", Some(body)).await;
    for k in ["rgb_png", "mask_png", "depth_png"] {
        assert_eq!(a[k], b[k], "{k}");
    }
    assert!(a["warnings"].as_array().unwrap().is_empty());
    let (w, h, _) = imageio::decode_rgb_png(&B64.decode(a["rgb_png"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((w, h), (20, 16));
    let (_, _, mask) = imageio::decode_mask_png(&B64.decode(a["mask_png"].as_str().unwrap()).unwrap(), 6).unwrap();
    assert_eq!(mask.len(), 320);
}

#[tokio::test]
async fn render_warns_outside_trained_poses() {
    let app = app(None);
    let (s, v) = call(&app, "POST", "/api/render", Some(json!({"latent_id": "scene_0", "yaw": 2.5, "pitch": 0.0, "outputs": ["rgb"]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["warnings"].as_array().unwrap().len(), 1);
    assert!(v.get("mask_png").is_none());
}

#[tokio::test]
async fn unknown_job_and_bad_latents_are_rejected() {
    let app = app(None);
    let (s, v) = call(&app, "GET", "/api/edits/job-99", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    let (s, _) = call(&app, "POST", "/api/latents", Some(json!({"from_job": "job-99", "name": "x"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/api/latents", Some(json!({"vector": [1.0, 2.0], "name": "x"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/latents", Some(json!({"vector": vec![0.5; 8], "name": "x", "persist": true}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "persist without a sidecar path");
    let (s, _) = call(&app, "POST", "/api/edits", Some(json!({"latent_id": "scene_0", "yaw": 0.0, "pitch": 0.0, "edited_mask_png": "%%%"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn imported_vector_becomes_renderable() {
    let app = app(None);
    let (s, v) = call(&app, "POST", "/api/latents", Some(json!({"vector": vec![0.25; 8], "name": "scene_0"}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["latent_id"].as_str().unwrap().to_string();
    assert_ne!(id, "scene_0", "ids are never reused");
    let (s, _) = call(&app, "POST", "/api/render", Some(json!({"latent_id": id, "yaw": 0.0, "pitch": 0.0, "width": 16, "height": 16}))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn edit_job_runs_to_completion_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let sidecar = dir.path().join("tiny.latents");
    let app = app(Some(sidecar.clone()));

    let ck = common::tiny_checkpoint();
    let cam = Camera::new(0.0, 0.0, 3.0, 16, 16);
    let mut mask = editing::render_latent(&ck, "scene_0", &cam).unwrap().argmax_mask();
    for row in 0..6 {
        for col in 4..12 {
            mask[row * 16 + col] = HAIR;
        }
    }
    let png = B64.encode(imageio::encode_mask_png(16, 16, &mask).unwrap());
    let submit = json!({"latent_id": "scene_0", "yaw": 0.0, "pitch": 0.0, "edited_mask_png": png, "steps": 45});
    let (s, v) = call(&app, "POST", "/api/edits", Some(submit)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = v["job_id"].as_str().unwrap().to_string();

    let started = Instant::now();
    let mut last_step = 0;
    let mut seen = Vec::new();
    let status = loop {
        let (s, v) = call(&app, "GET", &format!("/api/edits/{job}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let step = v["step"].as_u64().unwrap();
        assert!(step >= last_step, "step went backwards: {last_step} -> {step}");
        last_step = step;
        let st = v["status"].as_str().unwrap().to_string();
        if seen.last() != Some(&st) {
            seen.push(st.clone());
        }
        if st == "done" || st == "failed" {
            break v;
        }
        assert!(started.elapsed() < Duration::from_secs(120), "edit job did not finish");
        tokio::time::sleep(Duration::from_millis(5)).await;
    };
    assert_eq!(status["status"], "done", "{status}");
    assert_eq!(status["step"], 45);
    let order = ["queued", "running", "done"];
    let ranks: Vec<usize> = seen.iter().map(|s| order.iter().position(|o| o == s).unwrap()).collect();
    assert!(ranks.windows(2).all(|w| w[0] < w[1]), "{seen:?}");
    let result = status["result_latent_id"].as_str().unwrap().to_string();

    let (_, model) = call(&app, "GET", "/api/model", None).await;
    assert!(model["latent_ids"].as_array().unwrap().iter().any(|v| v == &json!(result)));

    let (s, v) = call(&app, "POST", "/api/latents", Some(json!({"from_job": job, "name": "fringe", "persist": true}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["persisted"], true);
    let saved = tpde::checkpoint::load_latents(&sidecar).unwrap();
    assert!(saved.get("fringe").is_ok());
    assert!(saved.get(&result).is_ok());
}
