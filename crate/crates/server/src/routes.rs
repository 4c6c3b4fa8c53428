use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use vilod_core::GroundTruthBox;

use crate::api::{self, AnnotationBody, RetrainReply};
use crate::engine::Engine;
use crate::error::ApiError;
use crate::events::JobLog;

pub type AppState = Arc<Engine>;

pub fn router(engine: AppState) -> Router {
    Router::new()
        .route("/session", post(start_session))
        .route("/state", get(state))
        .route("/projection", get(projection))
        .route("/heatmap", get(heatmap))
        .route("/suggestions", get(suggestions))
        .route("/images/{id}", get(image))
        .route("/images/{id}/predictions", get(predictions))
        .route("/annotations/{id}", post(annotate).delete(unannotate))
        .route("/retrain", post(retrain))
        .route("/trajectories", get(trajectories))
        .route("/training", get(training))
        .with_state(engine)
}

/// The authenticated user. The token comes from `Authorization: Bearer`,
/// or from a `token` query parameter for clients that cannot set headers on
/// a WebSocket handshake.
pub struct AuthUser(pub String);

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

impl FromRequestParts<AppState> for AuthUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, engine: &AppState) -> Result<Self, ApiError> {
        let header = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::to_owned);
        let token = match header {
            Some(t) => t,
            None => Query::<TokenQuery>::try_from_uri(&parts.uri)
                .ok()
                .and_then(|q| q.0.token)
                .ok_or(ApiError::Unauthorized)?,
        };
        engine.authenticate(token.trim()).map(AuthUser)
    }
}

async fn blocking<T, F>(engine: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
{
    let engine = engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn read_session<T, F>(engine: &AppState, user: String, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine, &vilod_core::IterationState) -> T + Send + 'static,
{
    blocking(engine, move |e| {
        let slot = e.session(&user)?;
        let s = slot.lock().unwrap();
        Ok(f(e, &s))
    })
    .await
}

async fn start_session(State(engine): State<AppState>, AuthUser(user): AuthUser) -> Result<Response, ApiError> {
    let (payload, created) = blocking(&engine, move |e| {
        let (slot, created) = e.start(&user)?;
        let s = slot.lock().unwrap();
        Ok((api::state_payload(&s, &e.baseline), created))
    })
    .await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(payload)).into_response())
}

async fn state(State(engine): State<AppState>, AuthUser(user): AuthUser) -> Result<Json<api::StatePayload>, ApiError> {
    read_session(&engine, user, |e, s| api::state_payload(s, &e.baseline))
        .await
        .map(Json)
}

async fn projection(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
) -> Result<Json<Vec<api::PointPayload>>, ApiError> {
    read_session(&engine, user, |_, s| api::points(s)).await.map(Json)
}

#[derive(Deserialize)]
struct HeatmapQuery {
    format: Option<String>,
}

async fn heatmap(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
    Query(q): Query<HeatmapQuery>,
) -> Result<Response, ApiError> {
    let grid = read_session(&engine, user, |_, s| s.heatmap.clone()).await?;
    Ok(match (q.format.as_deref(), grid) {
        (Some("csv"), Some(g)) => ([(CONTENT_TYPE, "text/csv")], g.to_csv()).into_response(),
        (_, g) => Json(g).into_response(),
    })
}

async fn suggestions(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
) -> Result<Json<Vec<vilod_core::ImageScore>>, ApiError> {
    read_session(&engine, user, |_, s| api::open_suggestions(s))
        .await
        .map(Json)
}

async fn trajectories(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
) -> Result<Json<api::Trajectories>, ApiError> {
    read_session(&engine, user, |e, s| api::trajectories(s, &e.baseline))
        .await
        .map(Json)
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(
    State(engine): State<AppState>,
    AuthUser(_): AuthUser,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let record = engine
        .registry
        .get(&id)
        .ok_or_else(|| ApiError::UnknownImage(id.clone()))?;
    let path = record
        .image_path
        .clone()
        .ok_or_else(|| ApiError::NoImageFile(id.clone()))?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| ApiError::NoImageFile(id))?;
    Ok(([(CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response())
}

async fn predictions(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
    Path(id): Path<String>,
) -> Result<Json<api::Predictions>, ApiError> {
    blocking(&engine, move |e| e.predictions(&user, &id)).await.map(Json)
}

async fn annotate(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<api::AnnotationReply>, ApiError> {
    let body: AnnotationBody = serde_json::from_slice(&body).map_err(|e| ApiError::MalformedBody(e.to_string()))?;
    let boxes: Vec<GroundTruthBox> = body.boxes.iter().map(GroundTruthBox::from).collect();
    blocking(&engine, move |e| e.annotate(&user, &id, boxes))
        .await
        .map(Json)
}

async fn unannotate(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
    Path(id): Path<String>,
) -> Result<Json<api::AnnotationReply>, ApiError> {
    blocking(&engine, move |e| e.unannotate(&user, &id)).await.map(Json)
}

async fn retrain(State(engine): State<AppState>, AuthUser(user): AuthUser) -> Result<Response, ApiError> {
    let (log, job) = blocking(&engine, move |e| e.begin_retrain(&user)).await?;
    let reply = RetrainReply {
        job_id: log.job_id,
        iteration: log.iteration,
    };
    let runner = engine.clone();
    tokio::task::spawn_blocking(move || runner.run_job(&log, job));
    Ok((StatusCode::ACCEPTED, Json(reply)).into_response())
}

#[derive(Deserialize)]
struct TrainingQuery {
    job: Option<u64>,
}

async fn training(
    State(engine): State<AppState>,
    AuthUser(user): AuthUser,
    Query(q): Query<TrainingQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let log = engine.job(&user, q.job)?;
    Ok(ws.on_upgrade(move |socket| stream_events(socket, log)))
}

async fn stream_events(mut socket: WebSocket, log: Arc<JobLog>) {
    let mut sub = log.subscribe();
    loop {
        let batch = sub.next_batch().await;
        if batch.is_empty() {
            break;
        }
        for event in batch {
            let text = serde_json::to_string(&event).expect("events serialize");
            if socket.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}
