//! Decision and reward requests for callers that talk JSON instead of
//! linking the library. The HTTP binding lives in the CLI crate; this module
//! holds the request types, validation and the mapping to status codes.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ValidationError;
use crate::exploration::{DecisionEvent, ExploreError, Explorer};
use crate::types::{Context, EventKey, EventTime, FeatureSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub id: String,
    #[serde(default)]
    pub features: FeatureSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub app_id: String,
    /// Caller-chosen event id; generated when absent.
    #[serde(default)]
    pub event_id: Option<String>,
    #[serde(default)]
    pub shared: FeatureSet,
    pub actions: Vec<ActionSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionResponse {
    #[serde(rename = "Action")]
    pub action: String,
    #[serde(rename = "EventId")]
    pub event_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    #[serde(alias = "eventId")]
    pub event_id: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardAck {
    #[serde(rename = "EventId")]
    pub event_id: String,
    #[serde(rename = "Accepted")]
    pub accepted: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("unknown application {0:?}")]
    UnknownApp(String),
    #[error("duplicate action id {0:?}")]
    DuplicateAction(String),
    #[error("empty action id")]
    EmptyActionId,
    #[error("reward {0} is not a finite number")]
    BadReward(f64),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

impl GatewayError {
    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::UnknownApp(_) => 404,
            _ => 400,
        }
    }
}

impl From<ExploreError> for GatewayError {
    fn from(e: ExploreError) -> Self {
        match e {
            ExploreError::Invalid(v) => GatewayError::Invalid(v),
        }
    }
}

/// Stateless front for one application's explorer.
pub struct Gateway {
    explorer: Arc<Explorer>,
    id_prefix: String,
    next_id: AtomicU64,
}

impl Gateway {
    /// Generated event ids are `<app_id>-<n>`.
    pub fn new(explorer: Arc<Explorer>) -> Self {
        let prefix = explorer.config().app_id.clone();
        Gateway::with_id_prefix(explorer, prefix)
    }

    /// Generated event ids are `<prefix>-<n>`. A server should include
    /// something unique per process start in the prefix.
    pub fn with_id_prefix(explorer: Arc<Explorer>, prefix: impl Into<String>) -> Self {
        Gateway {
            explorer,
            id_prefix: prefix.into(),
            next_id: AtomicU64::new(0),
        }
    }

    pub fn explorer(&self) -> &Arc<Explorer> {
        &self.explorer
    }

    pub fn app_id(&self) -> &str {
        &self.explorer.config().app_id
    }

    fn context(req: &DecisionRequest) -> Result<Context, GatewayError> {
        let mut seen = HashSet::new();
        for a in &req.actions {
            if a.id.is_empty() {
                return Err(GatewayError::EmptyActionId);
            }
            if !seen.insert(a.id.as_str()) {
                return Err(GatewayError::DuplicateAction(a.id.clone()));
            }
        }
        Ok(Context::new(
            req.shared.clone(),
            req.actions.iter().map(|a| a.features.clone()).collect(),
        )?)
    }

    /// Chooses an action and returns its id together with the event id the
    /// caller must use for the reward.
    pub fn handle_decision(
        &self,
        req: &DecisionRequest,
        now: EventTime,
    ) -> Result<(DecisionResponse, DecisionEvent), GatewayError> {
        if req.app_id != self.app_id() {
            return Err(GatewayError::UnknownApp(req.app_id.clone()));
        }
        let ctx = Self::context(req)?;
        let key = match &req.event_id {
            Some(id) => EventKey::new(id.clone())?,
            None => {
                let n = self.next_id.fetch_add(1, Ordering::Relaxed);
                EventKey::new(format!("{}-{n}", self.id_prefix))?
            }
        };
        let (action, event) = self.explorer.choose_action(key, ctx, now)?;
        let resp = DecisionResponse {
            action: req.actions[action.zero_based()].id.clone(),
            event_id: event.key.to_string(),
        };
        Ok((resp, event))
    }

    /// Forwards a reward. Unknown event ids are accepted; the join decides
    /// what happens to them.
    pub fn handle_reward(&self, req: &RewardRequest, now: EventTime) -> Result<RewardAck, GatewayError> {
        if !req.reward.is_finite() {
            return Err(GatewayError::BadReward(req.reward));
        }
        let key = EventKey::new(req.event_id.clone())?;
        self.explorer.report_reward(key, req.reward, now);
        Ok(RewardAck {
            event_id: req.event_id.clone(),
            accepted: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exploration::{ExplorationConfig, Observation};
    use std::sync::mpsc;

    fn gateway(eps: f64) -> (Gateway, mpsc::Receiver<Observation>) {
        let (tx, rx) = mpsc::channel();
        let ex = Explorer::new(ExplorationConfig::epsilon_greedy("app", eps))
            .unwrap()
            .with_sink(tx);
        (Gateway::new(Arc::new(ex)), rx)
    }

    fn req(ids: &[&str], event_id: Option<&str>) -> DecisionRequest {
        DecisionRequest {
            app_id: "app".into(),
            event_id: event_id.map(str::to_owned),
            shared: FeatureSet::new().with("user", "age", 31.0),
            actions: ids
                .iter()
                .map(|id| ActionSpec {
                    id: id.to_string(),
                    features: FeatureSet::new().with("item", id, 1.0),
                })
                .collect(),
        }
    }

    #[test]
    fn decision_returns_one_of_the_actions() {
        let (g, rx) = gateway(1.0);
        let (resp, _) = g.handle_decision(&req(&["a1", "a2", "a3"], None), EventTime(0)).unwrap();
        assert!(["a1", "a2", "a3"].contains(&resp.action.as_str()));
        assert_eq!(resp.event_id, "app-0");
        match rx.try_recv().unwrap() {
            Observation::Decision(d) => assert_eq!(d.key.as_str(), "app-0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn same_event_id_same_action() {
        let (g, _rx) = gateway(1.0);
        let r = req(&["a", "b", "c", "d", "e"], Some("fixed-id"));
        let first = g.handle_decision(&r, EventTime(0)).unwrap().0;
        for t in 1..20 {
            assert_eq!(g.handle_decision(&r, EventTime(t)).unwrap().0, first);
        }
    }

    #[test]
    fn validation_errors_are_4xx() {
        let (g, _rx) = gateway(0.2);
        let e = g.handle_decision(&req(&[], None), EventTime(0)).unwrap_err();
        assert_eq!(e, GatewayError::Invalid(ValidationError::NoActions));
        assert_eq!(e.status(), 400);
        let e = g.handle_decision(&req(&["x", "x"], None), EventTime(0)).unwrap_err();
        assert_eq!(e.status(), 400);
        let mut other = req(&["x"], None);
        other.app_id = "nope".into();
        assert_eq!(g.handle_decision(&other, EventTime(0)).unwrap_err().status(), 404);
    }

    #[test]
    fn logged_context_matches_request() {
        let (g, rx) = gateway(0.2);
        let r = req(&["a1", "a2"], Some("e"));
        g.handle_decision(&r, EventTime(5)).unwrap();
        let Observation::Decision(d) = rx.try_recv().unwrap() else {
            panic!("expected a decision")
        };
        let logged = serde_json::to_string(&d.context).unwrap();
        let expected = serde_json::to_string(&Context::new(
            r.shared.clone(),
            r.actions.iter().map(|a| a.features.clone()).collect(),
        )
        .unwrap())
        .unwrap();
        assert_eq!(logged, expected);
    }

    #[test]
    fn rewards_are_forwarded() {
        let (g, rx) = gateway(0.2);
        let ack = g
            .handle_reward(
                &RewardRequest {
                    event_id: "whatever".into(),
                    reward: 0.5,
                },
                EventTime(3),
            )
            .unwrap();
        assert!(ack.accepted);
        match rx.try_recv().unwrap() {
            Observation::Reward(r) => {
                assert_eq!(r.reward.get(), 0.5);
                assert_eq!(r.timestamp, EventTime(3));
            }
            other => panic!("{other:?}"),
        }
        let e = g
            .handle_reward(
                &RewardRequest {
                    event_id: "x".into(),
                    reward: f64::NAN,
                },
                EventTime(3),
            )
            .unwrap_err();
        assert_eq!(e.status(), 400);
    }

    #[test]
    fn wire_format() {
        let resp = DecisionResponse {
            action: "a2".into(),
            event_id: "X".into(),
        };
        assert_eq!(serde_json::to_string(&resp).unwrap(), r#"{"Action":"a2","EventId":"X"}"#);
        let r: RewardRequest = serde_json::from_str(r#"{"eventId":"X","reward":1}"#).unwrap();
        assert_eq!(r.event_id, "X");
    }
}
