//! JSON-over-HTTP service.
//!
//! Routes: `GET /health`, `GET /model/info`, `POST /classify`. Errors are
//! returned as `{"error": "..."}` with a 4xx/5xx status.

use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::serve::checkpoint::Checkpoint;
use crate::serve::classify::{is_client_error, ClassifyRequest, Classifier};

/// Shared service state. The classifier is swapped atomically; requests in
/// flight keep the `Arc` they started with.
#[derive(Debug, Clone, Default)]
pub struct ServiceState {
    classifier: Arc<RwLock<Option<Arc<Classifier>>>>,
}

impl ServiceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_classifier(classifier: Classifier) -> Self {
        let state = Self::new();
        state.swap(classifier);
        state
    }

    /// Replaces the served model, returning the previous one.
    pub fn swap(&self, classifier: Classifier) -> Option<Arc<Classifier>> {
        let mut slot = self.classifier.write().unwrap_or_else(|e| e.into_inner());
        slot.replace(Arc::new(classifier))
    }

    pub fn load(&self, checkpoint: Checkpoint) -> Option<Arc<Classifier>> {
        self.swap(Classifier::new(checkpoint))
    }

    pub fn current(&self) -> Option<Arc<Classifier>> {
        self.classifier.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model/info", get(model_info))
        .route("/classify", post(classify).options(preflight))
        .layer(axum::middleware::map_response(allow_any_origin))
        .with_state(state)
}

/// Serves on an already bound listener until the process is stopped.
pub async fn serve(listener: TcpListener, state: ServiceState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(state): State<ServiceState>) -> Response {
    match state.current() {
        Some(c) => Json(c.info().clone()).into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"),
    }
}

async fn classify(State(state): State<ServiceState>, body: Bytes) -> Response {
    let request: ClassifyRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    let Some(classifier) = state.current() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded");
    };
    let result = tokio::task::spawn_blocking(move || classifier.classify(&request)).await;
    match result {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e)) if is_client_error(&e) => error(StatusCode::BAD_REQUEST, e),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn preflight() -> StatusCode {
    StatusCode::NO_CONTENT
}

// The browser UI may be served from a different origin than the API.
async fn allow_any_origin(mut response: Response) -> Response {
    let headers = response.headers_mut();
    headers.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    headers.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
    headers.insert(
        header::ACCESS_CONTROL_ALLOW_METHODS,
        HeaderValue::from_str(&format!("{}, {}, {}", Method::GET, Method::POST, Method::OPTIONS)).unwrap(),
    );
    response
}
