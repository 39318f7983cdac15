//! HTTP control surface.
//!
//! - `POST /control/start`, `POST /control/stop`, `GET /control/status`
//! - `POST /admin/services` with `{"key","webhook","owner"}`
//! - `DELETE /admin/services/{key}?owner=...`
//! - `GET /admin/services`

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ControlCommand, Gateway};
use crate::domain::ServiceRegistration;
use crate::registry::RegistryError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub key: String,
    pub webhook: String,
    pub owner: String,
}

#[derive(Debug, Deserialize)]
struct OwnerQuery {
    owner: Option<String>,
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/control/start", post(start))
        .route("/control/stop", post(stop))
        .route("/control/status", get(status))
        .route("/admin/services", post(register).get(list))
        .route("/admin/services/:key", delete(unregister))
        .with_state(gateway)
}

async fn start(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    Json(gw.control(ControlCommand::Start))
}

async fn stop(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    Json(gw.control(ControlCommand::Stop))
}

async fn status(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    Json(gw.status())
}

fn registry_error(e: RegistryError) -> Response {
    let status = match &e {
        RegistryError::KeyTaken(_) => StatusCode::CONFLICT,
        RegistryError::NotFound(_) => StatusCode::NOT_FOUND,
        RegistryError::NotOwner { .. } => StatusCode::FORBIDDEN,
        RegistryError::RejectedKey(_)
        | RegistryError::InvalidWebhook(_)
        | RegistryError::InvalidOwner(_) => StatusCode::UNPROCESSABLE_ENTITY,
        RegistryError::CorruptJournal { .. } | RegistryError::Io(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    };
    (status, Json(json!({ "error": e.to_string() }))).into_response()
}

async fn register(State(gw): State<Arc<Gateway>>, Json(req): Json<RegisterRequest>) -> Response {
    let result = gw.registry().write().register(&req.key, &req.webhook, &req.owner);
    match result {
        Ok(reg) => (StatusCode::CREATED, Json(reg)).into_response(),
        Err(e) => registry_error(e),
    }
}

async fn unregister(
    State(gw): State<Arc<Gateway>>,
    Path(key): Path<String>,
    Query(q): Query<OwnerQuery>,
) -> Response {
    let Some(owner) = q.owner else {
        return (StatusCode::BAD_REQUEST, Json(json!({ "error": "owner is required" })))
            .into_response();
    };
    let result = gw.registry().write().unregister(&key, &owner);
    match result {
        Ok(()) => Json(json!({ "removed": key })).into_response(),
        Err(e) => registry_error(e),
    }
}

async fn list(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    let services: Vec<ServiceRegistration> = gw.registry().read().entries().cloned().collect();
    Json(json!({ "services": services }))
}
