use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::{FeedbackRequest, Health, Result, Service, ServeError, SuggestResponse};

#[derive(Debug, Deserialize)]
struct SuggestParams {
    #[serde(default)]
    user: String,
    #[serde(default)]
    prefix: String,
    k: Option<usize>,
}

async fn suggest(
    State(service): State<Arc<Service>>,
    params: std::result::Result<Query<SuggestParams>, QueryRejection>,
) -> Result<Json<SuggestResponse>> {
    let Query(p) = params.map_err(|e| ServeError::Malformed(e.body_text()))?;
    // Decoding is CPU-bound; keep it off the async workers.
    tokio::task::spawn_blocking(move || service.suggest(&p.user, &p.prefix, p.k))
        .await
        .map_err(|e| ServeError::Worker(e.to_string()))?
        .map(Json)
}

async fn feedback(
    State(service): State<Arc<Service>>,
    body: std::result::Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>> {
    let Json(req) = body.map_err(|e| ServeError::Malformed(e.body_text()))?;
    tokio::task::spawn_blocking(move || service.record_feedback(req))
        .await
        .map_err(|e| ServeError::Worker(e.to_string()))??;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn healthz(State(service): State<Arc<Service>>) -> Json<Health> {
    Json(service.health())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/suggest", get(suggest))
        .route("/feedback", post(feedback))
        .route("/healthz", get(healthz))
        .with_state(service)
}

pub async fn serve_on(listener: TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

/// Like [`serve_on`], returning once `shutdown` resolves and open
/// connections have drained.
pub async fn serve_until<F>(listener: TcpListener, service: Arc<Service>, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}
