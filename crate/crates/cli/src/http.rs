//! JSON-over-HTTP front end for the recommendation handlers.
//!
//! Routes:
//!
//! * `POST /v1/recommend`: [`RecommendRequest`] to [`RecommendResponse`]
//! * `POST /v1/whatif`: [`WhatIfRequest`] to [`WhatIfResponse`]
//! * `GET /v1/models`: loaded model versions and vocabulary sizes
//! * `GET /v1/health`: liveness and model count
//!
//! Errors are `{code, message, field?}` with the status implied by `code`.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dtr_core::serve::{
    handle_health, handle_recommend, handle_whatif, ErrorCode, HealthResponse, ModelStore, ModelsResponse,
    RecommendRequest, RecommendResponse, ServiceError, WhatIfRequest, WhatIfResponse,
};

pub struct ApiError(pub ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let text = r.body_text();
        ApiError(ServiceError::invalid(rejection_field(&text), text))
    }
}

/// Best-effort name of the request field a body rejection refers to;
/// `body` when none can be recovered.
pub fn rejection_field(text: &str) -> String {
    let detail = text.split_once("target type: ").map_or(text, |(_, d)| d);
    let (path, rest) = match detail.split_once(": ") {
        Some((p, r)) if !p.contains(' ') && p != "." => (Some(p), r),
        _ => (None, detail),
    };
    let named = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|k| rest.split_once(k))
        .and_then(|(_, r)| r.split_once('`'))
        .map(|(n, _)| n);
    match (path, named) {
        (Some(p), Some(n)) => format!("{p}.{n}"),
        (None, Some(n)) => n.to_string(),
        (Some(p), None) => p.to_string(),
        (None, None) => "body".to_string(),
    }
}

type Shared = State<Arc<ModelStore>>;

async fn recommend(
    State(store): Shared,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<Json<RecommendResponse>, ApiError> {
    let Json(req) = body?;
    Ok(Json(handle_recommend(&req, &store)?))
}

async fn whatif(
    State(store): Shared,
    body: Result<Json<WhatIfRequest>, JsonRejection>,
) -> Result<Json<WhatIfResponse>, ApiError> {
    let Json(req) = body?;
    Ok(Json(handle_whatif(&req, &store)?))
}

async fn models(State(store): Shared) -> Json<ModelsResponse> {
    Json(store.models())
}

async fn health(State(store): Shared) -> Json<HealthResponse> {
    Json(handle_health(&store))
}

async fn not_found() -> ApiError {
    ApiError(ServiceError { code: ErrorCode::NotFound, message: "no such route".into(), field: None })
}

/// Routes over a read-only model store; safe to serve concurrently.
pub fn router(store: Arc<ModelStore>) -> Router {
    Router::new()
        .route("/v1/recommend", post(recommend))
        .route("/v1/whatif", post(whatif))
        .route("/v1/models", get(models))
        .route("/v1/health", get(health))
        .fallback(not_found)
        .with_state(store)
}
