//! Review API: list, inspect and decide on pending dataset candidates, and
//! export the approved records. Every `/api` route requires the shared
//! reviewer token in the configured header.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderName, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ffaa_core::dataset::{CandidateRecord, CandidateStatus, VqaRecord};
use ffaa_core::review::{Decision, ReviewDecision, ReviewError, ReviewStore, DEFAULT_PAGE_SIZE};

#[derive(Clone)]
pub struct ApiState {
    pub store: Arc<ReviewStore>,
    pub token: Arc<str>,
    pub token_header: HeaderName,
    pub default_page_size: usize,
}

impl ApiState {
    pub fn new(store: ReviewStore, token: &str, token_header: &str) -> Result<Self, String> {
        Ok(Self {
            store: Arc::new(store),
            token: token.into(),
            token_header: HeaderName::try_from(token_header)
                .map_err(|e| format!("bad token header `{token_header}`: {e}"))?,
            default_page_size: DEFAULT_PAGE_SIZE,
        })
    }
}

/// Error body: `{"error": kind, "message": text}`.
pub struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (code, kind) = match &e {
            ReviewError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ReviewError::NotPending { .. } => (StatusCode::CONFLICT, "not_pending"),
            ReviewError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid"),
            ReviewError::Dataset(_) | ReviewError::Io(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError(code, kind, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    pub status: Option<String>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBody {
    pub reviewer: String,
    pub decision: Decision,
    #[serde(default)]
    pub reason: Option<String>,
    /// Supersede an earlier decision instead of making the first one.
    #[serde(default)]
    pub revision: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportBody {
    pub vqa: Vec<VqaRecord>,
    pub candidates: Vec<CandidateRecord>,
}

async fn require_token(State(s): State<ApiState>, req: Request, next: Next) -> Response {
    let ok = req
        .headers()
        .get(&s.token_header)
        .is_some_and(|v| v.as_bytes() == s.token.as_bytes());
    if ok {
        next.run(req).await
    } else {
        ApiError(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong reviewer token".into(),
        )
        .into_response()
    }
}

async fn list(
    State(s): State<ApiState>,
    Query(q): Query<ListQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let status = match q.status.as_deref().filter(|v| !v.is_empty()) {
        None => None,
        Some(v) => Some(CandidateStatus::parse(v).ok_or_else(|| {
            ApiError(
                StatusCode::BAD_REQUEST,
                "invalid",
                format!("unknown status `{v}`"),
            )
        })?),
    };
    let page_size = q.page_size.unwrap_or(s.default_page_size).clamp(1, 500);
    Ok(Json(s.store.list(status, q.page.unwrap_or(0), page_size)))
}

async fn detail(
    State(s): State<ApiState>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(s.store.get(&id)?))
}

async fn decide(
    State(s): State<ApiState>,
    Path(id): Path<String>,
    body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(body) =
        body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, "invalid", e.body_text()))?;
    let d = ReviewDecision {
        candidate_id: id,
        reviewer: body.reviewer,
        decision: body.decision,
        reason: body.reason,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        revision: false,
    };
    let store = s.store.clone();
    let out = tokio::task::spawn_blocking(move || {
        if body.revision {
            store.revise(d)
        } else {
            store.decide(d)
        }
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(out))
}

async fn export(State(s): State<ApiState>) -> Result<impl IntoResponse, ApiError> {
    let (vqa, candidates) = s.store.export()?;
    Ok(Json(ExportBody { vqa, candidates }))
}

async fn stats(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.store.stats())
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/candidates", get(list))
        .route("/api/candidates/{id}", get(detail))
        .route("/api/candidates/{id}/decision", post(decide))
        .route("/api/export", get(export))
        .route("/api/stats", get(stats))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: ApiState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
