#![allow(dead_code)]

use axum::body::{Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use bodyflow::data::{random_pose, render_figure};
use bodyflow::generator::{Generator, GeneratorConfig};
use bodyflow::imaging::{encode_png, BitDepth};
use bodyflow::keypoints::KeypointSet;
use bodyflow::train::{save_checkpoint, Checkpoint};
use bodyflow::{Generator32, Image32};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

/// A small generator whose head is non-zero, so flows are not trivially zero.
pub fn test_generator() -> Generator32 {
    generator_with_live_head(GeneratorConfig::tiny())
}

/// Fresh weights except a pseudo-random output head, so the flow is not zero.
pub fn generator_with_live_head(config: GeneratorConfig) -> Generator32 {
    let mut g = Generator::init(config, 11).unwrap();
    for (name, t) in g.params_mut().iter_mut() {
        if name.starts_with("head") {
            let mut k = 0u32;
            t.mapv_inplace(|_| {
                k = k.wrapping_mul(1_103_515_245).wrapping_add(12_345);
                ((k >> 16) as f32 / 65_536.0 - 0.5) * 0.4
            });
        }
    }
    g
}

pub fn write_test_checkpoint(path: &std::path::Path) {
    save_checkpoint(&Checkpoint::from_generator(&test_generator()), path).unwrap();
}

/// A drawn figure at `w`×`h` with its pose.
pub fn figure(w: usize, h: usize, seed: u64) -> (Image32, KeypointSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kp = random_pose(&mut rng, (h, w));
    let img = render_figure::<f32, _>(&kp, &mut rng, (h, w));
    (img, kp)
}

pub fn figure_upload(w: usize, h: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let (img, kp) = figure(w, h, seed);
    (encode_png(&img, BitDepth::Eight).unwrap(), serde_json::to_vec(&kp.to_json()).unwrap())
}

const BOUNDARY: &str = "bodyflow-test-boundary";

pub fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n").as_bytes(),
        );
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

pub fn reshape_request(id: &str, mu: f64) -> Request<Body> {
    Request::post(format!("/sessions/{id}/reshape"))
        .header("content-type", "application/json")
        .body(Body::from(serde_json::json!({ "mu": mu }).to_string()))
        .unwrap()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub fn delete(uri: &str) -> Request<Body> {
    Request::delete(uri).body(Body::empty()).unwrap()
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Bytes) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

pub async fn create_session(app: &Router, image: &[u8], keypoints: &[u8]) -> (String, serde_json::Value) {
    let (status, body) = send(app, multipart(&[("image", image), ("keypoints", keypoints)])).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    (v["session_id"].as_str().unwrap().to_string(), v)
}

pub fn png_pixels(bytes: &[u8]) -> image::DynamicImage {
    image::load_from_memory(bytes).unwrap()
}
