//! JSON HTTP API over a [`Service`], plus static files at `/`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use mailgraph_core::service::views::{category_messages, category_tree, memberships, message_detail};
use mailgraph_core::service::{Engine, Service, ServiceError};

const PLACEHOLDER: &str = "<!doctype html>\n<title>mailgraph</title>\n<p>mailgraph is running. The web console is not installed; \
set <code>static_dir</code> in the config to serve it. The JSON API lives under <code>/api/</code>.</p>\n";

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting malformed input as a 400 with `{error}`.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("invalid request body: {e}")))
}

/// Runs a mutation on the blocking pool.
async fn write<T: Send + 'static>(
    service: &Arc<Service>,
    op: impl FnOnce(&mut Engine) -> mailgraph_core::service::Result<T> + Send + 'static,
) -> Result<T, ServiceError> {
    let service = Arc::clone(service);
    tokio::task::spawn_blocking(move || service.write(op))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

pub fn router(service: Arc<Service>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/categories", get(list_categories).post(create_category))
        .route("/api/categories/{id}/messages", get(list_messages))
        .route("/api/categories/{id}/subcluster", post(subcluster))
        .route("/api/messages/{id}", get(show_message))
        .route("/api/messages/{id}/spam", post(mark_spam))
        .route("/api/corrections", post(correct))
        .route("/api/sync", post(start_sync))
        .route("/api/sync/{job_id}", get(sync_status))
        .route("/api/{*rest}", get(unknown_route).post(unknown_route))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

async fn unknown_route() -> ApiError {
    ApiError(ServiceError::NotFound("no such endpoint".into()))
}

async fn list_categories(State(service): State<Arc<Service>>) -> impl IntoResponse {
    Json(category_tree(&service.snapshot()))
}

async fn list_messages(State(service): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(category_messages(&service.snapshot(), &id)?))
}

async fn show_message(State(service): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(message_detail(&service.snapshot(), &id)?))
}

#[derive(Deserialize)]
struct NewCategory {
    name: String,
    #[serde(default)]
    parent: Option<String>,
}

async fn create_category(State(service): State<Arc<Service>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewCategory = parse_body(&body)?;
    let category = write(&service, move |e| e.create_category(&req.name, req.parent.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(category)))
}

async fn subcluster(State(service): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let children = write(&service, move |e| e.subcluster(&id)).await?;
    Ok(Json(children))
}

#[derive(Deserialize)]
struct Correction {
    message_id: String,
    #[serde(default)]
    from_category: Option<String>,
    to_category: String,
}

async fn correct(State(service): State<Arc<Service>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: Correction = parse_body(&body)?;
    let neighbors =
        write(&service, move |e| e.correct(&req.message_id, req.from_category.as_deref(), &req.to_category)).await?;
    Ok(Json(memberships(&service.snapshot(), neighbors)))
}

#[derive(Deserialize)]
struct SpamVerdict {
    is_spam: bool,
}

async fn mark_spam(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: SpamVerdict = parse_body(&body)?;
    let neighbors = write(&service, move |e| e.mark_spam(&id, req.is_spam)).await?;
    Ok(Json(memberships(&service.snapshot(), neighbors)))
}

#[derive(Deserialize, Default)]
struct SyncRequest {
    #[serde(default)]
    accounts: Option<Vec<String>>,
}

async fn start_sync(State(service): State<Arc<Service>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: SyncRequest = parse_body(&body)?;
    let svc = Arc::clone(&service);
    let job = tokio::task::spawn_blocking(move || svc.start_sync(req.accounts.as_deref()))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))??;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.job_id, "state": job.state }))))
}

async fn sync_status(State(service): State<Arc<Service>>, Path(job_id): Path<String>) -> ApiResult<impl IntoResponse> {
    let job = service.job(&job_id).ok_or_else(|| ServiceError::NotFound(format!("unknown job: {job_id}")))?;
    Ok(Json(job))
}
