mod common;

use axum::http::StatusCode;
use bodyflow::flow::decode_flo;
use bodyflow_cli::service::{router, AppState, ServiceConfig};
use common::*;

fn app(capacity: usize) -> axum::Router {
    router(AppState::new(
        test_generator(),
        "ckpt-test",
        ServiceConfig { capacity, workers: 1 },
    ))
}

#[tokio::test]
async fn healthz_reports_checkpoint() {
    let (status, body) = send(&app(4), get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoint_id"], "ckpt-test");
}

#[tokio::test]
async fn mu_zero_returns_the_upload_and_repeats_are_identical() {
    let app = app(4);
    let (png, kp) = figure_upload(180, 240, 1);
    let (id, created) = create_session(&app, &png, &kp).await;
    assert_eq!(created["flow_stats"]["width"], 180);
    assert_eq!(created["flow_stats"]["height"], 240);
    assert!(created["flow_stats"]["max_magnitude"].as_f64().unwrap() > 0.0);

    let (status, zero) = send(&app, reshape_request(&id, 0.0)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(png_pixels(&zero).to_rgb8(), png_pixels(&png).to_rgb8());

    let (_, a) = send(&app, reshape_request(&id, 0.5)).await;
    let (_, b) = send(&app, reshape_request(&id, 0.5)).await;
    assert_eq!(a, b);
    assert_ne!(png_pixels(&a).to_rgb8(), png_pixels(&png).to_rgb8());
    let (_, neg) = send(&app, reshape_request(&id, -0.5)).await;
    assert_ne!(neg, a);
}

#[tokio::test]
async fn parallel_reshapes_on_one_session_agree() {
    let app = app(4);
    let (png, kp) = figure_upload(128, 128, 2);
    let (id, _) = create_session(&app, &png, &kp).await;
    let (a, b, c) = tokio::join!(
        send(&app, reshape_request(&id, 1.0)),
        send(&app, reshape_request(&id, 1.0)),
        send(&app, reshape_request(&id, 1.0))
    );
    assert_eq!(a.1, b.1);
    assert_eq!(b.1, c.1);
}

#[tokio::test]
async fn mu_outside_unit_range_is_unprocessable() {
    let app = app(4);
    let (png, kp) = figure_upload(96, 96, 3);
    let (id, _) = create_session(&app, &png, &kp).await;
    for mu in [1.5, -1.01] {
        let (status, body) = send(&app, reshape_request(&id, mu)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(String::from_utf8_lossy(&body).contains("[-1, 1]"));
    }
    let (status, _) = send(&app, reshape_request(&id, 1.0)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn unknown_sessions_are_not_found() {
    let app = app(4);
    assert_eq!(send(&app, reshape_request("nope", 0.0)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, get("/sessions/nope/flow")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, delete("/sessions/nope")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_uploads_are_bad_requests() {
    let app = app(4);
    let (png, kp) = figure_upload(96, 96, 4);
    let cases: Vec<Vec<(&str, &[u8])>> = vec![
        vec![("image", &png), ("keypoints", b"{not json")],
        vec![("image", &png), ("keypoints", br#"{"width": 96, "height": 96, "keypoints": [[1, 2, 1]]}"#)],
        vec![("image", &png)],
        vec![("image", b"not an image"), ("keypoints", &kp)],
    ];
    for parts in cases {
        let (status, body) = send(&app, multipart(&parts)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&body));
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].is_string());
    }
    let bad_body = reshape_request("x", 0.0).map(|_| axum::body::Body::from("{\"mu\": \"a\"}"));
    assert!(send(&app, bad_body).await.0.is_client_error());
}

#[tokio::test]
async fn flow_downloads_and_creation_is_deterministic() {
    let app = app(4);
    let (png, kp) = figure_upload(150, 100, 5);
    let (a, _) = create_session(&app, &png, &kp).await;
    let (b, _) = create_session(&app, &png, &kp).await;
    assert_ne!(a, b);
    let (status, flo_a) = send(&app, get(&format!("/sessions/{a}/flow?format=flo"))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, flo_b) = send(&app, get(&format!("/sessions/{b}/flow?format=flo"))).await;
    assert_eq!(flo_a, flo_b);
    let flow = decode_flo::<f32>(&flo_a).unwrap();
    assert_eq!(flow.size(), (100, 150));

    let (status, vis) = send(&app, get(&format!("/sessions/{a}/flow"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(png_pixels(&vis).width(), 150);
    assert_eq!(send(&app, get(&format!("/sessions/{a}/flow?format=exr"))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn delete_and_lru_eviction() {
    let app = app(2);
    let (png, kp) = figure_upload(64, 64, 6);
    let (first, _) = create_session(&app, &png, &kp).await;
    let (second, _) = create_session(&app, &png, &kp).await;
    // touching `first` makes `second` the eviction candidate
    assert_eq!(send(&app, reshape_request(&first, 0.0)).await.0, StatusCode::OK);
    let (third, _) = create_session(&app, &png, &kp).await;
    assert_eq!(send(&app, reshape_request(&second, 0.0)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, reshape_request(&first, 0.0)).await.0, StatusCode::OK);

    assert_eq!(send(&app, delete(&format!("/sessions/{third}"))).await.0, StatusCode::NO_CONTENT);
    assert_eq!(send(&app, delete(&format!("/sessions/{third}"))).await.0, StatusCode::NOT_FOUND);
}
