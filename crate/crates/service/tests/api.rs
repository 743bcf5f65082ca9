use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use click3d_core::scene_io::{encode_scene, InstanceLabeling, PointCloud, Scene};
use click3d_core::segmenter::protocol::decode_scores;
use click3d_service::{router, ServiceConfig, SessionManager};

fn line_scene() -> Scene {
    // Two 30-point rods along x, 3 m apart.
    let positions: Vec<[f64; 3]> = (0..60)
        .map(|i| {
            let (rod, k) = (i / 30, i % 30);
            [rod as f64 * 3.0 + k as f64 * 0.02, 0.0, 0.0]
        })
        .collect();
    let ids = (0..60).map(|i| i / 30 + 1).collect();
    Scene::new(
        "rods",
        PointCloud::new(positions, None).unwrap(),
        Some(InstanceLabeling::new(ids)),
    )
    .unwrap()
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec(), headers)
}

async fn json_call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes, _) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn app(dir: &tempfile::TempDir) -> Router {
    router(Arc::new(
        SessionManager::new(ServiceConfig::new(dir.path())).unwrap(),
    ))
}

async fn upload(app: &Router) {
    let (manifest, blob) = encode_scene(&line_scene());
    let (status, meta) = json_call(
        app,
        Method::POST,
        "/v1/scenes",
        Some(json!({"manifest": manifest, "blob_b64": STANDARD.encode(blob)})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{meta}");
    assert_eq!(meta["n_points"], 60);
    assert_eq!(meta["n_chunks"], 1);
}

#[tokio::test]
async fn full_session_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    upload(&app).await;

    let (status, list) = json_call(&app, Method::GET, "/v1/scenes", None).await;
    assert_eq!(
        (status, list),
        (StatusCode::OK, json!({"scenes": ["rods"]}))
    );
    let (status, meta) = json_call(&app, Method::GET, "/v1/scenes/rods/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(meta["instance_ids"], json!([1, 2]));

    let (status, session) = json_call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"scene_id": "rods"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let id = session["session_id"].as_str().unwrap().to_string();
    assert_eq!(session["mask_version"], 0);

    let (status, click) = json_call(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/clicks"),
        Some(json!({"polarity": "pos", "position": [3.3, 1.0, 0.0]})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{click}");
    assert_eq!(click["mask_version"], 1);
    assert_eq!(click["snapped_point_index"], 45);
    assert_eq!(click["click"]["polarity"], "pos");
    let scores = decode_scores(click["mask"]["scores_b64"].as_str().unwrap()).unwrap();
    assert_eq!(scores.len(), 60);
    assert!(scores[..30].iter().all(|&s| s < 0.5) && scores[30..].iter().all(|&s| s >= 0.5));
    assert_eq!(click["mask"]["n_foreground"], 30);

    let (status, bits) = json_call(
        &app,
        Method::GET,
        &format!("/v1/sessions/{id}/mask?format=bits"),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let packed = STANDARD.decode(bits["bits_b64"].as_str().unwrap()).unwrap();
    assert_eq!(packed.len(), 8);
    let unpacked: Vec<bool> = (0..60).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    assert!(unpacked.iter().enumerate().all(|(i, &b)| b == (i >= 30)));

    let (status, bytes, headers) = call(
        &app,
        Method::GET,
        &format!("/v1/scenes/rods/chunks/0?session={id}"),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["x-click3d-points"], "60");
    assert_eq!(headers["x-click3d-has-color"], "false");
    assert_eq!(headers["x-click3d-mask-version"], "1");
    assert_eq!(bytes.len(), 60 * 12 + 60 * 4);

    let (status, undo) =
        json_call(&app, Method::POST, &format!("/v1/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        (undo["mask_version"].as_u64(), undo["lossy"].as_bool()),
        (Some(2), Some(false))
    );
    assert_eq!(undo["mask"]["n_foreground"], 0);
    let (status, old) = json_call(
        &app,
        Method::GET,
        &format!("/v1/sessions/{id}/mask?version=1"),
        None,
    )
    .await;
    assert_eq!(
        (status, old["n_foreground"].as_u64()),
        (StatusCode::OK, Some(30))
    );

    json_call(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/clicks"),
        Some(json!({"polarity": "pos", "point_index": 10})),
    )
    .await;
    let (status, result) = json_call(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/finalize"),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(result["iou"], 1.0);
    assert_eq!(result["instance_id"], 1);
    let (_, again) = json_call(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/finalize"),
        None,
    )
    .await;
    assert_eq!(again, result);

    let (status, err) = json_call(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/clicks"),
        Some(json!({"polarity": "neg", "point_index": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "conflict");
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    upload(&app).await;
    let (manifest, blob) = encode_scene(&line_scene());
    let (status, _) = json_call(
        &app,
        Method::POST,
        "/v1/scenes",
        Some(json!({"manifest": manifest, "blob_b64": STANDARD.encode(blob)})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = json_call(
        &app,
        Method::POST,
        "/v1/scenes",
        Some(json!({"manifest": manifest, "blob_b64": "AAAA"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = json_call(&app, Method::GET, "/v1/scenes/none/meta", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = json_call(&app, Method::GET, "/v1/scenes/rods/chunks/1", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = json_call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"scene_id": "none"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, session) = json_call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"scene_id": "rods"})),
    )
    .await;
    let id = session["session_id"].as_str().unwrap();
    let (status, _) = json_call(&app, Method::POST, &format!("/v1/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = json_call(
        &app,
        Method::POST,
        &format!("/v1/sessions/{id}/clicks"),
        Some(json!({"polarity": "pos", "point_index": 1, "position": [0, 0, 0]})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = json_call(
        &app,
        Method::GET,
        &format!("/v1/sessions/{id}/mask?version=7"),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = json_call(&app, Method::GET, "/v1/sessions/zzz", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
