//! HTTP front end of the segmentation service. Bodies are JSON records,
//! images are PNG. Failures answer `{"error": {"code", "message"}}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use omnifield::segserver::{Click, ErrorCode, Layer, SegError, SegResult, SegService, Session};
use serde::Deserialize;
use serde_json::{json, Value};

pub struct AppState {
    pub service: SegService,
    /// Segment exports land in `<export_root>/<session id>/`.
    pub export_root: PathBuf,
}

pub type Shared = Arc<AppState>;

struct ApiError(SegError);

impl From<SegError> for ApiError {
    fn from(e: SegError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.code {
            ErrorCode::NoSurface => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::NoSelection => StatusCode::CONFLICT,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Io | ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({"error": {"code": self.0.code.as_str(), "message": self.0.message}});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(SegError::new(ErrorCode::BadRequest, msg))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| bad(format!("request body: {e}")))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Runs a session call on the blocking pool; rendering is CPU-bound.
async fn on_session<T, F>(state: Shared, id: String, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> SegResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || state.service.with_session(&id, f))
        .await
        .map_err(|e| ApiError(SegError::new(ErrorCode::Internal, e.to_string())))?
        .map_err(ApiError)
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/scenes", get(scenes))
        .route("/session", post(create_session))
        .route("/session/{id}", get(session_state))
        .route("/session/{id}/render", get(render))
        .route("/session/{id}/click", post(click))
        .route("/session/{id}/scoremap", get(scoremap))
        .route("/session/{id}/threshold", post(threshold))
        .route("/session/{id}/mask", get(mask))
        .route("/session/{id}/select", post(select))
        .route("/session/{id}/grow", post(grow))
        .route("/session/{id}/discretize", post(discretize))
        .route("/session/{id}/labels", get(labels))
        .route("/session/{id}/segments", post(save_segment).get(list_segments))
        .route("/session/{id}/export", post(export))
        .route("/session/{id}/refresh", post(refresh))
        .with_state(state)
}

async fn scenes(State(state): State<Shared>) -> Json<Value> {
    Json(json!({ "scenes": state.service.scenes() }))
}

/// Body: `{"scene": id}` or the bare scene id.
async fn create_session(State(state): State<Shared>, body: Bytes) -> ApiResult<Json<Value>> {
    let scene = match serde_json::from_slice::<Value>(&body) {
        Ok(Value::Object(o)) => o.get("scene").and_then(Value::as_str).map(str::to_string),
        Ok(Value::String(s)) => Some(s),
        _ => std::str::from_utf8(&body).ok().map(|s| s.trim().to_string()),
    }
    .filter(|s| !s.is_empty())
    .ok_or_else(|| bad("body must name a scene"))?;
    let id = state.service.create_session(&scene)?;
    Ok(Json(json!({ "session": id, "scene": scene })))
}

async fn session_state(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = on_session(state, id, |s| Ok(s.state())).await?;
    Ok(Json(json!(s)))
}

#[derive(Deserialize)]
struct ViewQuery {
    view: Option<usize>,
    layer: Option<String>,
    t: Option<f64>,
}

async fn render(State(state): State<Shared>, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let layer_name = q.layer.unwrap_or_else(|| "rgb".into());
    let layer = Layer::parse(&layer_name).ok_or_else(|| bad(format!("layer must be rgb, feat or depth, got {layer_name:?}")))?;
    let bytes = on_session(state, id, move |s| {
        let view = q.view.unwrap_or(s.view());
        s.render_layer(view, layer)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Deserialize)]
struct ClickBody {
    view: usize,
    x: usize,
    y: usize,
}

fn score_url(id: &str, view: usize, rev: usize) -> String {
    format!("/session/{id}/scoremap?view={view}&rev={rev}")
}

fn mask_url(id: &str, view: usize, t: f64) -> String {
    format!("/session/{id}/mask?view={view}&t={t}")
}

fn anchors_json(s: &Session) -> Value {
    json!(s
        .anchors()
        .iter()
        .map(|a| json!({"point": a.point, "view": a.view, "x": a.x, "y": a.y}))
        .collect::<Vec<_>>())
}

async fn click(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let c: ClickBody = parse_json(&body)?;
    let sid = id.clone();
    let v = on_session(state, id, move |s| {
        let (anchor, _) = s.click(Click { view: c.view, x: c.x, y: c.y })?;
        Ok(json!({
            "anchor_id": anchor.point,
            "feature": anchor.feature,
            "view": c.view,
            "score_map_url": score_url(&sid, c.view, anchor.point as usize),
            "mask_url": mask_url(&sid, c.view, s.threshold()),
            "threshold": s.threshold(),
        }))
    })
    .await?;
    Ok(Json(v))
}

async fn scoremap(State(state): State<Shared>, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let bytes = on_session(state, id, move |s| {
        let view = q.view.unwrap_or(s.view());
        s.score_image(view)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Deserialize)]
struct ThresholdBody {
    t: f64,
}

async fn threshold(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let b: ThresholdBody = parse_json(&body)?;
    let sid = id.clone();
    let v = on_session(state, id, move |s| {
        let m = s.set_threshold(b.t)?;
        Ok(json!({
            "threshold": b.t,
            "view": s.view(),
            "selected": m.count(),
            "mask_url": mask_url(&sid, s.view(), b.t),
        }))
    })
    .await?;
    Ok(Json(v))
}

/// Mask PNG for a view at threshold `t` (session threshold by default).
/// The URL fully determines the image, so clients cannot see a stale mask.
async fn mask(State(state): State<Shared>, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let bytes = on_session(state, id, move |s| {
        let view = q.view.unwrap_or(s.view());
        let t = q.t.unwrap_or(s.threshold());
        if !(-1.0..=1.0).contains(&t) {
            return Err(SegError::new(ErrorCode::BadRequest, format!("threshold must lie in [-1, 1], got {t}")));
        }
        s.mask_png(view, t)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Deserialize)]
struct SelectBody {
    clicks: Vec<ClickBody>,
}

async fn select(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let b: SelectBody = parse_json(&body)?;
    let sid = id.clone();
    let v = on_session(state, id, move |s| {
        let clicks: Vec<Click> = b.clicks.iter().map(|c| Click { view: c.view, x: c.x, y: c.y }).collect();
        let m = s.multi_select(&clicks)?;
        Ok(json!({
            "anchors": anchors_json(s),
            "view": s.view(),
            "selected": m.count(),
            "mask_url": mask_url(&sid, s.view(), s.threshold()),
        }))
    })
    .await?;
    Ok(Json(v))
}

#[derive(Deserialize)]
struct GrowBody {
    threshold: f64,
}

async fn grow(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let b: GrowBody = parse_json(&body)?;
    let v = on_session(state, id, move |s| {
        let pts = s.grow(b.threshold)?;
        Ok(json!({ "threshold": b.threshold, "count": pts.len(), "points": pts }))
    })
    .await?;
    Ok(Json(v))
}

async fn discretize(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let b: GrowBody = parse_json(&body)?;
    let sid = id.clone();
    let v = on_session(state, id, move |s| {
        let view = s.view();
        let d = s.discretize(b.threshold)?;
        Ok(json!({
            "threshold": b.threshold,
            "component_count": d.component_count(),
            "sizes": d.sizes,
            "note": d.note,
            "label_map_url": format!("/session/{sid}/labels?view={view}"),
        }))
    })
    .await?;
    Ok(Json(v))
}

async fn labels(State(state): State<Shared>, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<Response> {
    let bytes = on_session(state, id, move |s| {
        let view = q.view.unwrap_or(s.view());
        s.label_image(view)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Deserialize)]
struct NameBody {
    name: String,
}

async fn save_segment(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let b: NameBody = parse_json(&body)?;
    let v = on_session(state, id, move |s| {
        let seg = s.save_segment(&b.name)?;
        Ok(json!({ "name": seg.name, "threshold": seg.threshold, "count": seg.points.len() }))
    })
    .await?;
    Ok(Json(v))
}

async fn list_segments(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let v = on_session(state, id, |s| {
        let segs: Vec<Value> = s
            .segments()
            .values()
            .map(|g| json!({ "name": g.name, "threshold": g.threshold, "count": g.points.len(), "points": g.points }))
            .collect();
        Ok(json!({ "segments": segs }))
    })
    .await?;
    Ok(Json(v))
}

async fn export(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let dir = state.export_root.join(&id);
    let v = on_session(state, id, move |s| {
        let files = s.export_segments(&dir)?;
        Ok(json!({ "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>() }))
    })
    .await?;
    Ok(Json(v))
}

async fn refresh(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let v = on_session(state, id, |s| {
        let changed = s.refresh();
        Ok(json!({ "changed": changed, "snapshot_version": s.snapshot().version }))
    })
    .await?;
    Ok(Json(v))
}

/// Serves until interrupted.
pub async fn serve(state: Shared, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
