//! HTTP binding for [`LocalService`].
//!
//! | method | path | body / query |
//! |---|---|---|
//! | POST | `/api/decision` | JSON [`DecisionRequest`] |
//! | GET | `/api/decision/{app}/{a1}/{a2}/...` | optional `?eventId=` |
//! | POST | `/api/reward` | JSON [`RewardRequest`] |
//! | GET | `/api/reward` | `?eventId=..&reward=..` |
//! | GET | `/api/status` | |
//!
//! Errors come back as `{"error": "..."}` with 400 for bad input and 404 for
//! an unknown application.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use banditloop_core::gateway::{ActionSpec, DecisionRequest, DecisionResponse, GatewayError, RewardAck, RewardRequest};
use banditloop_core::service::LocalService;
use banditloop_core::FeatureSet;
use serde_json::json;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError {
            status: StatusCode::from_u16(e.status()).unwrap_or(StatusCode::BAD_REQUEST),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(svc: Arc<LocalService>) -> Router {
    Router::new()
        .route("/api/decision", post(decision_json))
        .route("/api/decision/{app}/{*actions}", get(decision_path))
        .route("/api/reward", get(reward_query).post(reward_json))
        .route("/api/status", get(status))
        .with_state(svc)
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

async fn decision_json(State(svc): State<Arc<LocalService>>, body: Bytes) -> ApiResult<DecisionResponse> {
    let req: DecisionRequest = parse(&body)?;
    Ok(Json(svc.decide(&req)?))
}

/// Path form: each segment after the app id is an action id, with a single
/// `item:<id>` feature.
async fn decision_path(
    State(svc): State<Arc<LocalService>>,
    Path((app, actions)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<DecisionResponse> {
    let actions = actions
        .split('/')
        .filter(|s| !s.is_empty())
        .map(|id| ActionSpec {
            id: id.to_owned(),
            features: FeatureSet::new().with("item", id, 1.0),
        })
        .collect();
    let req = DecisionRequest {
        app_id: app,
        event_id: event_id(&q),
        shared: FeatureSet::new(),
        actions,
    };
    Ok(Json(svc.decide(&req)?))
}

fn event_id(q: &HashMap<String, String>) -> Option<String> {
    q.get("eventId").or_else(|| q.get("event_id")).cloned()
}

async fn reward_json(State(svc): State<Arc<LocalService>>, body: Bytes) -> ApiResult<RewardAck> {
    let req: RewardRequest = parse(&body)?;
    Ok(Json(svc.reward(&req)?))
}

async fn reward_query(
    State(svc): State<Arc<LocalService>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<RewardAck> {
    let event_id = event_id(&q).ok_or_else(|| ApiError::bad_request("missing eventId"))?;
    let reward = q
        .get("reward")
        .ok_or_else(|| ApiError::bad_request("missing reward"))?
        .parse::<f64>()
        .map_err(|e| ApiError::bad_request(format!("reward: {e}")))?;
    Ok(Json(svc.reward(&RewardRequest { event_id, reward })?))
}

async fn status(State(svc): State<Arc<LocalService>>) -> Json<serde_json::Value> {
    let s = svc.status();
    let mean = s.learning_latency_mean_ms();
    let mut v = serde_json::to_value(&s).expect("status serializes");
    v["learning_latency_ms_mean"] = json!(mean);
    Json(v)
}
