//! Exploration: a lower layer maps a context to a distribution over actions,
//! a top layer samples it with the per-interaction PRG and logs the result
//! at the point of decision.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ValidationError;
use crate::policy::{self, decode_model, LinearPolicy};
use crate::prg::{sample_cumulative, Prg};
use crate::store::{Store, StoreError};
use crate::types::{
    ActionIndex, Context, EventKey, EventTime, Probability, Reward, DEFAULT_MODEL_ID,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    EpsilonGreedy,
    Bag { bag_size: usize },
    Uniform,
}

/// Policy used until the first model arrives.
#[derive(Debug, Clone, PartialEq)]
pub enum DefaultPolicy {
    Action(ActionIndex),
    Linear(LinearPolicy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationConfig {
    pub app_id: String,
    pub epsilon0: f64,
    pub algorithm: Algorithm,
    pub default_policy: Option<DefaultPolicy>,
    pub model_refresh_interval_ms: u64,
    /// Mix Bag votes with ε0-uniform mass so every action keeps ε0/|A|.
    pub floor_bag_votes: bool,
}

impl ExplorationConfig {
    pub fn epsilon_greedy(app_id: &str, epsilon0: f64) -> Self {
        ExplorationConfig {
            app_id: app_id.to_owned(),
            epsilon0,
            algorithm: Algorithm::EpsilonGreedy,
            default_policy: None,
            model_refresh_interval_ms: 1_000,
            floor_bag_votes: true,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(0.0..=1.0).contains(&self.epsilon0) {
            return Err(ValidationError::Epsilon(self.epsilon0));
        }
        if let Algorithm::Bag { bag_size: 0 } = self.algorithm {
            return Err(ValidationError::BagSize);
        }
        Ok(())
    }
}

/// One probability per action; non-negative and summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn uniform(n: usize) -> Self {
        ActionDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, a: ActionIndex) -> f64 {
        self.probs[a.zero_based()]
    }

    /// Samples with one uniform from `prg`.
    pub fn sample(&self, prg: &mut Prg) -> ActionIndex {
        ActionIndex::from_zero_based(sample_cumulative(&self.probs, prg.next_f64()))
    }

    fn epsilon_greedy(n: usize, greedy: ActionIndex, epsilon0: f64) -> Self {
        let floor = epsilon0 / n as f64;
        let mut probs = vec![floor; n];
        probs[greedy.zero_based()] += 1.0 - epsilon0;
        ActionDistribution { probs }
    }
}

fn default_greedy(cfg: &ExplorationConfig, ctx: &Context) -> Option<ActionIndex> {
    match cfg.default_policy.as_ref()? {
        DefaultPolicy::Action(a) if ctx.check(*a).is_ok() => Some(*a),
        DefaultPolicy::Action(_) => None,
        DefaultPolicy::Linear(p) => Some(policy::greedy_action(p, ctx)),
    }
}

/// The exploration policy's distribution for `ctx`. Without a model or a
/// usable default policy it is uniform.
pub fn explore_distribution(
    cfg: &ExplorationConfig,
    model: Option<&LinearPolicy>,
    ctx: &Context,
) -> ActionDistribution {
    let n = ctx.action_count();
    let greedy = match model {
        Some(m) => Some(policy::greedy_action(m, ctx)),
        None => default_greedy(cfg, ctx),
    };
    let Some(greedy) = greedy else {
        return ActionDistribution::uniform(n);
    };
    match &cfg.algorithm {
        Algorithm::Uniform => ActionDistribution::uniform(n),
        Algorithm::EpsilonGreedy => ActionDistribution::epsilon_greedy(n, greedy, cfg.epsilon0),
        Algorithm::Bag { .. } => {
            let members = model.map(|m| m.bag.as_slice()).unwrap_or(&[]);
            let mut votes = vec![0.0; n];
            if members.is_empty() {
                votes[greedy.zero_based()] = 1.0;
            } else {
                let features = model.map(|m| m.features).unwrap_or_default();
                for w in members {
                    let a = policy::argmax_lowest(&policy::score_all(w, features, ctx));
                    votes[a.zero_based()] += 1.0;
                }
                let total = members.len() as f64;
                votes.iter_mut().for_each(|v| *v /= total);
            }
            if cfg.floor_bag_votes && cfg.epsilon0 > 0.0 {
                let floor = cfg.epsilon0 / n as f64;
                votes
                    .iter_mut()
                    .for_each(|v| *v = (1.0 - cfg.epsilon0) * *v + floor);
            }
            ActionDistribution { probs: votes }
        }
    }
}

/// The point-of-decision log record `⟨k, (x, a, p)⟩` plus the model used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub key: EventKey,
    pub context: Context,
    pub action: ActionIndex,
    pub probability: Probability,
    pub model_id: u64,
    pub timestamp: EventTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardObservation {
    pub key: EventKey,
    pub reward: Reward,
    pub timestamp: EventTime,
}

/// A keyed observation on its way to the join.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Observation {
    Decision(DecisionEvent),
    Reward(RewardObservation),
}

impl Observation {
    pub fn key(&self) -> &EventKey {
        match self {
            Observation::Decision(d) => &d.key,
            Observation::Reward(r) => &r.key,
        }
    }

    pub fn timestamp(&self) -> EventTime {
        match self {
            Observation::Decision(d) => d.timestamp,
            Observation::Reward(r) => r.timestamp,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Samples an action for `key` and builds its log record. The PRG is seeded
/// from `(app_id, key)` and drawn exactly once.
pub fn choose_action(
    cfg: &ExplorationConfig,
    model: Option<&LinearPolicy>,
    ctx: Context,
    key: EventKey,
    timestamp: EventTime,
) -> Result<(ActionIndex, DecisionEvent), ExploreError> {
    cfg.validate()?;
    let dist = explore_distribution(cfg, model, &ctx);
    let mut prg = Prg::for_interaction(&cfg.app_id, key.as_str());
    let action = dist.sample(&mut prg);
    let probability = Probability::new(dist.prob(action))?;
    let event = DecisionEvent {
        key,
        context: ctx,
        action,
        probability,
        model_id: model.map_or(DEFAULT_MODEL_ID, |m| m.model_id),
        timestamp,
    };
    Ok((action, event))
}

#[derive(Debug, Default)]
pub struct ExplorerMetrics {
    pub decisions: AtomicU64,
    pub rewards: AtomicU64,
    pub clamped_rewards: AtomicU64,
    pub refresh_failures: AtomicU64,
    pub model_swaps: AtomicU64,
    pub dropped_observations: AtomicU64,
}

impl ExplorerMetrics {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

/// Client-side explorer: shared by any number of decision callers, with
/// [`Explorer::refresh_model`] as the single writer of the model snapshot.
pub struct Explorer {
    cfg: ExplorationConfig,
    model: RwLock<Option<Arc<LinearPolicy>>>,
    sink: Option<Sender<Observation>>,
    last_refresh: Mutex<Option<EventTime>>,
    metrics: ExplorerMetrics,
}

impl Explorer {
    pub fn new(cfg: ExplorationConfig) -> Result<Self, ValidationError> {
        cfg.validate()?;
        Ok(Explorer {
            cfg,
            model: RwLock::new(None),
            sink: None,
            last_refresh: Mutex::new(None),
            metrics: ExplorerMetrics::default(),
        })
    }

    /// Observations are sent here as soon as they are produced.
    pub fn with_sink(mut self, sink: Sender<Observation>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn config(&self) -> &ExplorationConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &ExplorerMetrics {
        &self.metrics
    }

    pub fn snapshot(&self) -> Option<Arc<LinearPolicy>> {
        self.model.read().expect("model lock poisoned").clone()
    }

    pub fn current_model_id(&self) -> u64 {
        self.snapshot().map_or(DEFAULT_MODEL_ID, |m| m.model_id)
    }

    /// Installs a model directly, bypassing the store.
    pub fn install(&self, model: LinearPolicy) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(model));
        self.metrics.model_swaps.fetch_add(1, Ordering::Relaxed);
    }

    fn emit(&self, obs: Observation) {
        if let Some(sink) = &self.sink {
            if sink.send(obs).is_err() {
                self.metrics
                    .dropped_observations
                    .fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Decides with one model snapshot and logs the decision before
    /// returning, so callers cannot alter what was recorded.
    pub fn choose_action(
        &self,
        key: EventKey,
        ctx: Context,
        timestamp: EventTime,
    ) -> Result<(ActionIndex, DecisionEvent), ExploreError> {
        let snapshot = self.snapshot();
        let (action, event) = choose_action(&self.cfg, snapshot.as_deref(), ctx, key, timestamp)?;
        self.metrics.decisions.fetch_add(1, Ordering::Relaxed);
        self.emit(Observation::Decision(event.clone()));
        Ok((action, event))
    }

    /// Forwards `(k, r)`; out-of-range rewards are clamped into [0, 1].
    pub fn report_reward(&self, key: EventKey, value: f64, timestamp: EventTime) -> RewardObservation {
        let (reward, clamped) = Reward::clamped(value);
        if clamped {
            self.metrics.clamped_rewards.fetch_add(1, Ordering::Relaxed);
            log::warn!("reward {value} for {key} clamped to {}", reward.get());
        }
        self.metrics.rewards.fetch_add(1, Ordering::Relaxed);
        let obs = RewardObservation {
            key,
            reward,
            timestamp,
        };
        self.emit(Observation::Reward(obs.clone()));
        obs
    }

    /// Pulls the latest model if it is newer than the current one. Returns
    /// the id of a newly installed model.
    pub fn refresh_model(&self, store: &dyn Store) -> Result<Option<u64>, StoreError> {
        let result = self.try_refresh(store);
        if result.is_err() {
            self.metrics.refresh_failures.fetch_add(1, Ordering::Relaxed);
        }
        result
    }

    fn try_refresh(&self, store: &dyn Store) -> Result<Option<u64>, StoreError> {
        let Some(latest) = store.latest_model_id()? else {
            return Ok(None);
        };
        if latest <= self.current_model_id() {
            return Ok(None);
        }
        let bytes = store.get_model(Some(latest))?;
        let (model, _) = decode_model(&bytes).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        self.install(model);
        Ok(Some(latest))
    }

    /// Refreshes when the configured interval has elapsed since the last
    /// attempt. Failures keep the current model.
    pub fn maybe_refresh(&self, now: EventTime, store: &dyn Store) -> Option<u64> {
        {
            let mut last = self.last_refresh.lock().expect("refresh lock poisoned");
            if let Some(t) = *last {
                if now.0 < t.0.saturating_add(self.cfg.model_refresh_interval_ms) {
                    return None;
                }
            }
            *last = Some(now);
        }
        self.refresh_model(store).ok().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;
    use crate::policy::{encode_model, Weights};
    use crate::store::MemStore;
    use crate::types::FeatureSet;

    fn a(i: u32) -> ActionIndex {
        ActionIndex::new(i).unwrap()
    }

    fn key(s: &str) -> EventKey {
        EventKey::new(s).unwrap()
    }

    /// Context whose action `i` carries feature `action/x{i}` and a model
    /// preferring `greedy`.
    fn setup(n: usize, greedy: usize) -> (Context, LinearPolicy) {
        let actions = (1..=n)
            .map(|i| FeatureSet::new().with("", &format!("x{i}"), 1.0))
            .collect();
        let ctx = Context::new(FeatureSet::new(), actions).unwrap();
        let w = Weights::from_named([(format!("action/x{greedy}"), 1.0)]);
        (ctx, LinearPolicy::new(w, FeatureMap::UNION))
    }

    fn assert_close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn epsilon_greedy_msn_setting() {
        let (ctx, m) = setup(3, 1);
        let cfg = ExplorationConfig::epsilon_greedy("A", 0.33);
        let d = explore_distribution(&cfg, Some(&m), &ctx);
        assert_close(d.probs(), &[1.0 - 0.33 + 0.11, 0.11, 0.11]);
        assert!((d.probs()[0] - 0.78).abs() < 1e-12);
    }

    #[test]
    fn epsilon_greedy_four_actions() {
        let (ctx, m) = setup(4, 2);
        let cfg = ExplorationConfig::epsilon_greedy("A", 0.2);
        let d = explore_distribution(&cfg, Some(&m), &ctx);
        assert_close(d.probs(), &[0.05, 0.85, 0.05, 0.05]);
    }

    #[test]
    fn pure_exploration_is_uniform() {
        let (ctx, m) = setup(5, 3);
        let cfg = ExplorationConfig::epsilon_greedy("A", 1.0);
        let d = explore_distribution(&cfg, Some(&m), &ctx);
        assert_close(d.probs(), &[0.2; 5]);
    }

    #[test]
    fn no_model_no_default_is_uniform() {
        let (ctx, _) = setup(4, 1);
        let cfg = ExplorationConfig::epsilon_greedy("A", 0.1);
        assert_close(explore_distribution(&cfg, None, &ctx).probs(), &[0.25; 4]);
    }

    #[test]
    fn exploit_only_default_policy() {
        let (ctx, _) = setup(3, 1);
        let mut cfg = ExplorationConfig::epsilon_greedy("A", 0.0);
        cfg.default_policy = Some(DefaultPolicy::Action(a(3)));
        for i in 0..50 {
            let (act, ev) = choose_action(&cfg, None, ctx.clone(), key(&format!("k{i}")), EventTime(0)).unwrap();
            assert_eq!(act, a(3));
            assert_eq!(ev.probability.get(), 1.0);
            assert_eq!(ev.model_id, DEFAULT_MODEL_ID);
        }
    }

    #[test]
    fn bag_votes_with_floor() {
        let (ctx, mut m) = setup(3, 1);
        m.bag = vec![
            Weights::from_named([("action/x1", 1.0)]),
            Weights::from_named([("action/x2", 1.0)]),
            Weights::from_named([("action/x2", 1.0)]),
            Weights::new(), // tie → action 1
        ];
        let mut cfg = ExplorationConfig::epsilon_greedy("A", 0.0);
        cfg.algorithm = Algorithm::Bag { bag_size: 4 };
        assert_close(explore_distribution(&cfg, Some(&m), &ctx).probs(), &[0.5, 0.5, 0.0]);
        cfg.epsilon0 = 0.3;
        let d = explore_distribution(&cfg, Some(&m), &ctx);
        assert_close(d.probs(), &[0.7 * 0.5 + 0.1, 0.7 * 0.5 + 0.1, 0.1]);
        cfg.floor_bag_votes = false;
        assert_close(explore_distribution(&cfg, Some(&m), &ctx).probs(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn decisions_are_deterministic_per_key() {
        let (ctx, m) = setup(4, 2);
        let cfg = ExplorationConfig::epsilon_greedy("A", 0.5);
        let first = choose_action(&cfg, Some(&m), ctx.clone(), key("k1"), EventTime(0)).unwrap();
        for _ in 0..20 {
            let again = choose_action(&cfg, Some(&m), ctx.clone(), key("k1"), EventTime(0)).unwrap();
            assert_eq!(again, first);
        }
    }

    #[test]
    fn app_id_changes_the_draw() {
        let ua = Prg::for_interaction("A", "k1").next_f64();
        let ub = Prg::for_interaction("B", "k1").next_f64();
        assert_ne!(ua, ub);
        // The same uniform drives the sample.
        let (ctx, _) = setup(4, 1);
        let cfg = ExplorationConfig::epsilon_greedy("A", 1.0);
        let (act, _) = choose_action(&cfg, None, ctx, key("k1"), EventTime(0)).unwrap();
        assert_eq!(act.zero_based(), (ua * 4.0) as usize);
    }

    #[test]
    fn logged_pair_survives_caller_override() {
        let (tx, rx) = std::sync::mpsc::channel();
        let explorer = Explorer::new(ExplorationConfig::epsilon_greedy("A", 1.0))
            .unwrap()
            .with_sink(tx);
        let (ctx, _) = setup(4, 1);
        for i in 0..100 {
            let (chosen, _) = explorer
                .choose_action(key(&format!("k{i}")), ctx.clone(), EventTime(i))
                .unwrap();
            // Downstream logic shows something else.
            let _shown = ActionIndex::from_zero_based((chosen.zero_based() + 1) % 4);
            let Observation::Decision(ev) = rx.recv().unwrap() else {
                panic!("expected decision");
            };
            assert_eq!(ev.action, chosen);
            assert_eq!(ev.probability.get(), 0.25);
        }
    }

    #[test]
    fn rewards_are_forwarded_and_clamped() {
        let (tx, rx) = std::sync::mpsc::channel();
        let explorer = Explorer::new(ExplorationConfig::epsilon_greedy("A", 0.1))
            .unwrap()
            .with_sink(tx);
        let obs = explorer.report_reward(key("k1"), 1.0, EventTime(5));
        assert_eq!(obs.reward, Reward::ONE);
        assert_eq!(ExplorerMetrics::get(&explorer.metrics().clamped_rewards), 0);
        let obs = explorer.report_reward(key("k1"), 1.7, EventTime(6));
        assert_eq!(obs.reward, Reward::ONE);
        assert_eq!(ExplorerMetrics::get(&explorer.metrics().clamped_rewards), 1);
        // Orphans are accepted here.
        explorer.report_reward(key("orphan"), 1.0, EventTime(7));
        assert_eq!(rx.try_iter().count(), 3);
    }

    fn put(store: &MemStore, id: u64) {
        let mut p = LinearPolicy::zero(FeatureMap::UNION);
        p.model_id = id;
        store.put_model(id, &encode_model(&p, None).unwrap()).unwrap();
    }

    #[test]
    fn refresh_semantics() {
        let store = MemStore::new();
        let explorer = Explorer::new(ExplorationConfig::epsilon_greedy("A", 0.1)).unwrap();
        // Empty store: nothing installed, decisions stay uniform.
        assert_eq!(explorer.refresh_model(&store).unwrap(), None);
        assert!(explorer.snapshot().is_none());
        put(&store, 5);
        assert_eq!(explorer.refresh_model(&store).unwrap(), Some(5));
        put(&store, 7);
        assert_eq!(explorer.refresh_model(&store).unwrap(), Some(7));
        assert_eq!(explorer.current_model_id(), 7);
        // Same id: no-op.
        assert_eq!(explorer.refresh_model(&store).unwrap(), None);
        assert_eq!(ExplorerMetrics::get(&explorer.metrics().model_swaps), 2);
    }

    #[test]
    fn refresh_failure_keeps_model() {
        let store = MemStore::new();
        put(&store, 3);
        let explorer = Explorer::new(ExplorationConfig::epsilon_greedy("A", 0.1)).unwrap();
        explorer.refresh_model(&store).unwrap();
        store.set_available(false);
        assert!(explorer.refresh_model(&store).is_err());
        assert_eq!(explorer.current_model_id(), 3);
        assert_eq!(ExplorerMetrics::get(&explorer.metrics().refresh_failures), 1);
    }

    #[test]
    fn refresh_interval_is_respected() {
        let store = MemStore::new();
        let mut cfg = ExplorationConfig::epsilon_greedy("A", 0.1);
        cfg.model_refresh_interval_ms = 100;
        let explorer = Explorer::new(cfg).unwrap();
        assert_eq!(explorer.maybe_refresh(EventTime(0), &store), None);
        put(&store, 1);
        assert_eq!(explorer.maybe_refresh(EventTime(50), &store), None);
        assert_eq!(explorer.maybe_refresh(EventTime(100), &store), Some(1));
    }

    #[test]
    fn concurrent_decisions_with_swaps() {
        let (ctx, m) = setup(4, 2);
        let explorer = Arc::new(Explorer::new(ExplorationConfig::epsilon_greedy("A", 0.2)).unwrap());
        explorer.install(m.clone());
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let ex = Arc::clone(&explorer);
                let ctx = ctx.clone();
                std::thread::spawn(move || {
                    for i in 0..500 {
                        let (_, ev) = ex
                            .choose_action(key(&format!("t{t}-{i}")), ctx.clone(), EventTime(i))
                            .unwrap();
                        // Every decision uses one complete snapshot.
                        let p = ev.probability.get();
                        assert!((p - 0.05).abs() < 1e-12 || (p - 0.85).abs() < 1e-12, "{p}");
                    }
                })
            })
            .collect();
        for id in 1..50 {
            let mut next = m.clone();
            next.model_id = id;
            explorer.install(next);
        }
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn observation_wire_format() {
        let obs = Observation::Reward(RewardObservation {
            key: key("k1"),
            reward: Reward::ONE,
            timestamp: EventTime(12),
        });
        let s = serde_json::to_string(&obs).unwrap();
        assert_eq!(s, r#"{"type":"reward","key":"k1","reward":1.0,"timestamp":12}"#);
        assert_eq!(serde_json::from_str::<Observation>(&s).unwrap(), obs);
    }
}
