//! HTTP+JSON API under `/v1`.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/v1/scenes` | upload `{manifest, blob_b64}` in the internal format |
//! | GET | `/v1/scenes` | list scene ids |
//! | GET | `/v1/scenes/{id}/meta` | |
//! | GET | `/v1/scenes/{id}/chunks/{i}?session=` | binary chunk, see [`SceneChunk`] |
//! | POST | `/v1/sessions` | `{scene_id, backend?, epsilon?, instance_id?}` |
//! | GET | `/v1/sessions/{id}` | |
//! | POST | `/v1/sessions/{id}/clicks?format=` | `{polarity, point_index}` or `{polarity, position}` |
//! | POST | `/v1/sessions/{id}/undo?format=` | |
//! | GET | `/v1/sessions/{id}/mask?version=&format=` | |
//! | POST | `/v1/sessions/{id}/finalize` | |
//!
//! Masks come back as base64 little-endian float32 scores (`format=scores`,
//! the default) or as a base64 bitset of the thresholded mask, point `i` in
//! bit `i % 8` of byte `i / 8` (`format=bits`).

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use click3d_core::clickmap::{Click, Polarity};
use click3d_core::scene_io::{decode_scene, SceneManifest};
use click3d_core::segmenter::protocol::encode_scores;
use click3d_core::segmenter::SoftMask;

#[cfg(doc)]
use crate::manager::SceneChunk;
use crate::manager::{ClickTarget, CreateSession, MaskState, ServiceError, SessionManager};

/// Largest accepted scene upload.
pub const MAX_UPLOAD_BYTES: usize = 1 << 30;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Backend(_) => (StatusCode::BAD_GATEWAY, "backend"),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (
            status,
            Json(json!({"error": code, "message": self.to_string()})),
        )
            .into_response()
    }
}

type Shared = State<Arc<SessionManager>>;

async fn blocking<T, F>(manager: Arc<SessionManager>, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&SessionManager) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&manager))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    #[default]
    Scores,
    Bits,
}

#[derive(Debug, Default, Deserialize)]
struct FormatQuery {
    #[serde(default)]
    format: MaskFormat,
}

#[derive(Debug, Default, Deserialize)]
struct MaskQuery {
    version: Option<u64>,
    #[serde(default)]
    format: MaskFormat,
}

#[derive(Debug, Default, Deserialize)]
struct ChunkQuery {
    session: Option<String>,
}

/// Mask as returned by the API.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskBody {
    pub mask_version: u64,
    pub n_points: usize,
    pub n_foreground: usize,
    pub threshold: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_b64: Option<String>,
}

pub fn pack_bits(mask: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        bytes[i / 8] |= 1 << (i % 8);
    }
    bytes
}

fn mask_body(state: &MaskState, format: MaskFormat) -> MaskBody {
    let mask: &SoftMask = &state.mask;
    let binary = mask.binary();
    let mut body = MaskBody {
        mask_version: state.mask_version,
        n_points: mask.len(),
        n_foreground: binary.iter().filter(|&&b| b).count(),
        threshold: mask.threshold,
        scores_b64: None,
        bits_b64: None,
    };
    match format {
        MaskFormat::Scores => body.scores_b64 = Some(encode_scores(&mask.scores)),
        MaskFormat::Bits => body.bits_b64 = Some(STANDARD.encode(pack_bits(&binary))),
    }
    body
}

#[derive(Debug, Deserialize)]
struct UploadScene {
    manifest: SceneManifest,
    blob_b64: String,
}

async fn upload_scene(
    State(m): Shared,
    Json(req): Json<UploadScene>,
) -> Result<Response, ServiceError> {
    let meta = blocking(m, move |m| {
        let blob = STANDARD
            .decode(req.blob_b64.as_bytes())
            .map_err(|e| ServiceError::BadRequest(format!("invalid blob encoding: {e}")))?;
        let scene = decode_scene(&req.manifest, &blob, std::path::Path::new("upload"))
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        m.add_scene(scene, None)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(meta)).into_response())
}

async fn list_scenes(State(m): Shared) -> Json<serde_json::Value> {
    Json(json!({ "scenes": m.scene_ids() }))
}

async fn scene_meta(State(m): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(m.scene_meta(&id)?).into_response())
}

async fn scene_chunk(
    State(m): Shared,
    Path((id, index)): Path<(String, usize)>,
    Query(q): Query<ChunkQuery>,
) -> Result<Response, ServiceError> {
    let chunk = blocking(m, move |m| m.scene_chunk(&id, index, q.session.as_deref())).await?;
    let mut response = chunk.body.into_response();
    let headers = response.headers_mut();
    headers.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("application/octet-stream"),
    );
    let mut put = |name: &'static str, value: String| {
        headers.insert(name, HeaderValue::from_str(&value).expect("ascii header"));
    };
    put("x-click3d-first-point", chunk.first_point.to_string());
    put("x-click3d-points", chunk.n_points.to_string());
    put("x-click3d-has-color", chunk.has_color.to_string());
    put("x-click3d-has-scores", chunk.has_scores.to_string());
    if let Some(v) = chunk.mask_version {
        put("x-click3d-mask-version", v.to_string());
    }
    Ok(response)
}

async fn create_session(
    State(m): Shared,
    Json(req): Json<CreateSession>,
) -> Result<Response, ServiceError> {
    let info = blocking(m, move |m| m.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn session_info(State(m): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(m.session_info(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
struct ClickRequest {
    polarity: Polarity,
    #[serde(default)]
    point_index: Option<usize>,
    #[serde(default)]
    position: Option<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickResponse {
    pub mask_version: u64,
    pub click: Click,
    pub snapped_point_index: usize,
    pub snap_distance: f64,
    pub mask: MaskBody,
}

async fn add_click(
    State(m): Shared,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
    Json(req): Json<ClickRequest>,
) -> Result<Response, ServiceError> {
    let target = match (req.point_index, req.position) {
        (Some(i), None) => ClickTarget::Point(i),
        (None, Some(p)) => ClickTarget::Position(p),
        _ => {
            return Err(ServiceError::BadRequest(
                "give exactly one of point_index and position".into(),
            ))
        }
    };
    let outcome = blocking(m, move |m| m.add_click(&id, target, req.polarity)).await?;
    Ok(Json(ClickResponse {
        mask_version: outcome.state.mask_version,
        click: outcome.click,
        snapped_point_index: outcome.click.point_index.expect("clicks are snapped"),
        snap_distance: outcome.snap_distance,
        mask: mask_body(&outcome.state, q.format),
    })
    .into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UndoResponse {
    pub mask_version: u64,
    pub removed: Click,
    pub lossy: bool,
    pub mask: MaskBody,
}

async fn undo(
    State(m): Shared,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> Result<Response, ServiceError> {
    let outcome = blocking(m, move |m| m.undo(&id)).await?;
    Ok(Json(UndoResponse {
        mask_version: outcome.state.mask_version,
        removed: outcome.removed,
        lossy: outcome.lossy,
        mask: mask_body(&outcome.state, q.format),
    })
    .into_response())
}

async fn get_mask(
    State(m): Shared,
    Path(id): Path<String>,
    Query(q): Query<MaskQuery>,
) -> Result<Response, ServiceError> {
    let state = m.mask(&id, q.version)?;
    Ok(Json(mask_body(&state, q.format)).into_response())
}

async fn finalize(State(m): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let result = blocking(m, move |m| m.finalize(&id)).await?;
    Ok(Json(result).into_response())
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    let v1 = Router::new()
        .route(
            "/scenes",
            post(upload_scene)
                .get(list_scenes)
                .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/scenes/{id}/meta", get(scene_meta))
        .route("/scenes/{id}/chunks/{index}", get(scene_chunk))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/sessions/{id}/finalize", post(finalize));
    Router::new().nest("/v1", v1).with_state(manager)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    manager: Arc<SessionManager>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(shutdown)
        .await
}
