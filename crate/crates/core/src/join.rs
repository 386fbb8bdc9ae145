//! Reward join under a uniform experimental-unit delay.
//!
//! A decision at time `d` opens a window for its key. The first reward for
//! the key (in arrival order) whose time lies in `[d - U, d + U]` is joined;
//! rewards may arrive before their decision and are buffered. The joined
//! record is released when the watermark reaches `d + U`, with the default
//! reward if none matched, so every record waits exactly `U`.
//!
//! A watermark `W` asserts that all observations with time `≤ W` have been
//! ingested. Buffered rewards with `t + U ≤ W` can no longer match an
//! on-time decision and are dropped as orphans.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::exploration::{DecisionEvent, Observation, RewardObservation};
use crate::store::{Store, StoreError};
use crate::types::{ActionIndex, Context, EventKey, EventTime, Reward};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JoinConfig {
    pub experimental_unit_ms: u64,
    #[serde(default)]
    pub default_reward: Reward,
    /// When false, a joined record is released as soon as its reward
    /// arrives. This reintroduces reward-delay bias and exists only as a
    /// negative control.
    #[serde(default = "yes")]
    pub uniform_delay: bool,
}

fn yes() -> bool {
    true
}

impl JoinConfig {
    pub fn new(experimental_unit_ms: u64) -> Self {
        assert!(experimental_unit_ms > 0, "experimental unit must be positive");
        JoinConfig {
            experimental_unit_ms,
            default_reward: Reward::ZERO,
            uniform_delay: true,
        }
    }
}

/// A complete exploration datapoint `(x, a, r, p)`.
///
/// `probability` is kept as a raw number: logs can be corrupted and
/// validation happens where the data is consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedInteraction {
    pub key: EventKey,
    pub context: Context,
    pub action: ActionIndex,
    pub probability: f64,
    pub reward: Reward,
    pub decision_time: EventTime,
    pub emit_time: EventTime,
    pub model_id: u64,
}

impl JoinedInteraction {
    /// Canonical single-line JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("joined interaction serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JoinMetrics {
    pub decisions: u64,
    pub rewards: u64,
    pub emitted: u64,
    pub emitted_with_reward: u64,
    pub duplicate_decisions: u64,
    pub duplicate_rewards: u64,
    pub orphan_rewards: u64,
}

struct Window {
    event: DecisionEvent,
    reward: Option<Reward>,
    seq: u64,
    release: u64,
}

struct Pending {
    time: u64,
    reward: Reward,
    seq: u64,
}

pub struct JoinService {
    cfg: JoinConfig,
    open: HashMap<EventKey, Window>,
    /// (release time, arrival seq) → key
    schedule: BTreeMap<(u64, u64), EventKey>,
    pending: HashMap<EventKey, Vec<Pending>>,
    /// (expiry time, arrival seq) → key
    expiry: BTreeMap<(u64, u64), EventKey>,
    watermark: Option<u64>,
    seq: u64,
    metrics: JoinMetrics,
    store: Option<Arc<dyn Store>>,
}

impl JoinService {
    pub fn new(cfg: JoinConfig) -> Self {
        assert!(cfg.experimental_unit_ms > 0, "experimental unit must be positive");
        JoinService {
            cfg,
            open: HashMap::new(),
            schedule: BTreeMap::new(),
            pending: HashMap::new(),
            expiry: BTreeMap::new(),
            watermark: None,
            seq: 0,
            metrics: JoinMetrics::default(),
            store: None,
        }
    }

    /// Emitted records are also appended to this store's exploration log.
    pub fn with_store(mut self, store: Arc<dyn Store>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn config(&self) -> &JoinConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> JoinMetrics {
        self.metrics
    }

    pub fn watermark(&self) -> Option<EventTime> {
        self.watermark.map(EventTime)
    }

    /// Windows not yet released.
    pub fn open_windows(&self) -> usize {
        self.open.len()
    }

    pub fn buffered_rewards(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }

    fn in_window(&self, decision: u64, reward: u64) -> bool {
        let u = self.cfg.experimental_unit_ms;
        reward.saturating_add(u) >= decision && reward <= decision.saturating_add(u)
    }

    pub fn ingest(&mut self, obs: Observation) {
        self.seq += 1;
        match obs {
            Observation::Decision(d) => self.ingest_decision(d),
            Observation::Reward(r) => self.ingest_reward(r),
        }
    }

    fn ingest_decision(&mut self, event: DecisionEvent) {
        if self.open.contains_key(&event.key) {
            self.metrics.duplicate_decisions += 1;
            return;
        }
        self.metrics.decisions += 1;
        let d = event.timestamp.0;
        let deadline = d.saturating_add(self.cfg.experimental_unit_ms);
        let mut window = Window {
            event,
            reward: None,
            seq: self.seq,
            release: deadline,
        };
        if let Some(buffered) = self.pending.remove(&window.event.key) {
            for p in buffered {
                self.expiry.remove(&(p.time.saturating_add(self.cfg.experimental_unit_ms), p.seq));
                if !self.in_window(d, p.time) {
                    self.metrics.orphan_rewards += 1;
                } else if window.reward.is_none() {
                    window.reward = Some(p.reward);
                    if !self.cfg.uniform_delay {
                        window.release = d.max(p.time);
                    }
                } else {
                    self.metrics.duplicate_rewards += 1;
                }
            }
        }
        self.schedule
            .insert((window.release, window.seq), window.event.key.clone());
        self.open.insert(window.event.key.clone(), window);
    }

    fn ingest_reward(&mut self, obs: RewardObservation) {
        self.metrics.rewards += 1;
        let t = obs.timestamp.0;
        let u = self.cfg.experimental_unit_ms;
        if let Some(w) = self.open.get(&obs.key) {
            let d = w.event.timestamp.0;
            if !self.in_window(d, t) {
                self.metrics.orphan_rewards += 1;
            } else if w.reward.is_some() {
                self.metrics.duplicate_rewards += 1;
            } else {
                let (seq, old_release) = (w.seq, w.release);
                let w = self.open.get_mut(&obs.key).expect("window present");
                w.reward = Some(obs.reward);
                if !self.cfg.uniform_delay {
                    w.release = d.max(t);
                    self.schedule.remove(&(old_release, seq));
                    self.schedule.insert((w.release, seq), obs.key.clone());
                }
            }
            return;
        }
        self.expiry.insert((t.saturating_add(u), self.seq), obs.key.clone());
        self.pending.entry(obs.key).or_default().push(Pending {
            time: t,
            reward: obs.reward,
            seq: self.seq,
        });
    }

    /// Releases, in decision-time order, every window whose release time is
    /// at or before `watermark`. A watermark below the current one is
    /// treated as the current one.
    pub fn advance(&mut self, watermark: EventTime) -> Result<Vec<JoinedInteraction>, StoreError> {
        let w = self.watermark.map_or(watermark.0, |cur| cur.max(watermark.0));
        self.watermark = Some(w);
        let mut out = Vec::new();
        while let Some(entry) = self.schedule.first_entry() {
            if entry.key().0 > w {
                break;
            }
            let ((release, _), key) = entry.remove_entry();
            let window = self.open.remove(&key).expect("scheduled window is open");
            let reward = window.reward.unwrap_or(self.cfg.default_reward);
            if window.reward.is_some() {
                self.metrics.emitted_with_reward += 1;
            }
            self.metrics.emitted += 1;
            let ev = window.event;
            out.push(JoinedInteraction {
                key: ev.key,
                context: ev.context,
                action: ev.action,
                probability: ev.probability.get(),
                reward,
                decision_time: ev.timestamp,
                emit_time: EventTime(release),
                model_id: ev.model_id,
            });
        }
        while let Some(entry) = self.expiry.first_entry() {
            if entry.key().0 > w {
                break;
            }
            let ((_, seq), key) = entry.remove_entry();
            if let Some(list) = self.pending.get_mut(&key) {
                list.retain(|p| p.seq != seq);
                if list.is_empty() {
                    self.pending.remove(&key);
                }
            }
            self.metrics.orphan_rewards += 1;
        }
        if let Some(store) = &self.store {
            for ji in &out {
                store.append_interaction(ji)?;
            }
        }
        Ok(out)
    }
}
