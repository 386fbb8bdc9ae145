//! Online learner: IPS-weighted least squares on the observed action,
//! real-time policy evaluation, versioned checkpoints and a replay journal.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{featurize, FeatureMap};
use crate::hash::fnv1a64;
use crate::join::JoinedInteraction;
use crate::policy::{self, encode_model, LinearPolicy, Policy, TrainingCursor, Weights};
use crate::prg::Prg;
use crate::store::{Store, StoreError};
use crate::types::EventKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateSchedule {
    Constant,
    /// `η0 / √t` with `t` the steps since the last reset.
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResetInterval {
    /// Reset after this many training steps.
    Events { count: u64 },
    /// Reset whenever the decision time enters a new epoch of this length.
    Duration { ms: u64 },
}

/// Flags the learned policy when its progressive estimate falls below a
/// named candidate's by more than `margin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeguardConfig {
    pub baseline: String,
    pub margin: f64,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
}

fn default_min_count() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub learning_rate0: f64,
    pub rate_schedule: RateSchedule,
    #[serde(default)]
    pub reset_interval: Option<ResetInterval>,
    /// Checkpoint every this many training steps (needs a store).
    #[serde(default)]
    pub checkpoint_interval: Option<u64>,
    #[serde(default)]
    pub features: FeatureMap,
    /// Bootstrap members trained alongside the main weights, for Bag
    /// exploration. 0 disables them.
    #[serde(default)]
    pub bag_size: usize,
    #[serde(default)]
    pub safeguard: Option<SafeguardConfig>,
}

impl LearnerConfig {
    pub fn constant(learning_rate0: f64) -> Self {
        LearnerConfig {
            learning_rate0,
            rate_schedule: RateSchedule::Constant,
            reset_interval: None,
            checkpoint_interval: None,
            features: FeatureMap::QUADRATIC,
            bag_size: 0,
            safeguard: None,
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.learning_rate0.is_finite() && self.learning_rate0 > 0.0) {
            return Err(LearnError::Config(format!(
                "learning_rate0 must be positive, got {}",
                self.learning_rate0
            )));
        }
        match self.reset_interval {
            Some(ResetInterval::Events { count: 0 }) | Some(ResetInterval::Duration { ms: 0 }) => {
                return Err(LearnError::Config("reset interval must be positive".into()))
            }
            _ => {}
        }
        if self.checkpoint_interval == Some(0) {
            return Err(LearnError::Config("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("invalid interaction {key}: {reason}")]
    InvalidData { key: EventKey, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("stored model is unreadable: {0}")]
    Model(#[from] policy::ModelFormatError),
    #[error("stored model {0} has no training cursor")]
    NoCursor(u64),
    /// The prediction stopped being finite. Fatal; usually η·|φ|²/p is
    /// well above 2 and the learning rate needs to come down.
    #[error("weights diverged at step {step} ({key}); lower learning_rate0")]
    Diverged { step: u64, key: EventKey },
}

/// Incremental IPS accumulator for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueEstimate {
    pub policy_id: String,
    pub ips_sum: f64,
    pub count: u64,
    /// Smallest logged probability seen; 1 before any event.
    pub min_prob_seen: f64,
}

impl PolicyValueEstimate {
    pub fn new(policy_id: impl Into<String>) -> Self {
        PolicyValueEstimate {
            policy_id: policy_id.into(),
            ips_sum: 0.0,
            count: 0,
            min_prob_seen: 1.0,
        }
    }

    /// Adds one logged event; `matched` says whether the policy picks the
    /// logged action.
    pub fn observe(&mut self, matched: bool, reward: f64, probability: f64) {
        if matched {
            self.ips_sum += reward / probability;
        }
        self.count += 1;
        self.min_prob_seen = self.min_prob_seen.min(probability);
    }

    pub fn estimate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.ips_sum / self.count as f64)
    }

    /// Confidence width for `k` simultaneously evaluated policies.
    pub fn ci_width(&self, params: CiParams) -> Option<f64> {
        (self.count > 0).then(|| ci_width(params, self.min_prob_seen, self.count))
    }

    pub fn merge(&mut self, other: &PolicyValueEstimate) {
        self.ips_sum += other.ips_sum;
        self.count += other.count;
        self.min_prob_seen = self.min_prob_seen.min(other.min_prob_seen);
    }
}

/// Constants of the simultaneous confidence width
/// `sqrt(C / (ε N) · ln(K / δ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiParams {
    pub c: f64,
    pub k: u64,
    pub delta: f64,
}

impl Default for CiParams {
    fn default() -> Self {
        CiParams {
            c: 2.0,
            k: 1,
            delta: 0.05,
        }
    }
}

impl CiParams {
    pub fn with_k(k: u64) -> Self {
        CiParams {
            k,
            ..Default::default()
        }
    }
}

pub fn ci_width(params: CiParams, epsilon: f64, n: u64) -> f64 {
    (params.c / (epsilon * n as f64) * (params.k as f64 / params.delta).ln()).sqrt()
}

/// Evaluates a fixed set of candidate policies on a stream of interactions.
#[derive(Default)]
pub struct PolicyEvaluator {
    candidates: Vec<Box<dyn Policy>>,
    estimates: Vec<PolicyValueEstimate>,
}

impl PolicyEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, policy: Box<dyn Policy>) {
        self.candidates.push(policy);
        self.estimates.push(PolicyValueEstimate::new(name));
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn observe(&mut self, ji: &JoinedInteraction) {
        for (pi, est) in self.candidates.iter().zip(&mut self.estimates) {
            let matched = pi.choose(&ji.context) == ji.action;
            est.observe(matched, ji.reward.get(), ji.probability);
        }
    }

    pub fn estimates(&self) -> &[PolicyValueEstimate] {
        &self.estimates
    }

    pub fn get(&self, name: &str) -> Option<&PolicyValueEstimate> {
        self.estimates.iter().find(|e| e.policy_id == name)
    }
}

/// One line of the replay journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JournalRecord {
    /// Training step `step` consumed `key`; `digest` is the FNV-1a hash of
    /// the interaction's canonical log line.
    Step {
        step: u64,
        key: EventKey,
        model_id: u64,
        digest: String,
    },
    /// The interaction at this log position was rejected as invalid.
    Reject { key: EventKey, log_offset: u64 },
    /// The learning rate was reset before step `step`.
    Reset { step: u64, epoch: u64 },
    Checkpoint { model_id: u64, step: u64 },
}

impl JournalRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("journal record serializes")
    }
}

pub fn interaction_digest(ji: &JoinedInteraction) -> String {
    format!("{:016x}", fnv1a64(ji.to_line().as_bytes()))
}

pub fn encode_journal(records: &[JournalRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(r.to_line().as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn decode_journal(bytes: &[u8]) -> Result<Vec<JournalRecord>, serde_json::Error> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(serde_json::from_slice)
        .collect()
}

/// A model snapshot and the journal segment leading up to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_id: u64,
    pub model: Vec<u8>,
    pub journal: Vec<u8>,
    journal_written: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub step: u64,
    /// Model written by a cadence checkpoint during this step, if any.
    pub checkpointed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub model_id: u64,
    pub step: u64,
    pub log_offset: u64,
    pub invalid_data: u64,
    pub progressive: PolicyValueEstimate,
    pub candidates: Vec<PolicyValueEstimate>,
    pub safeguard_tripped: bool,
    pub pending_checkpoints: usize,
    pub checkpoint_failures: u64,
}

pub struct Learner {
    cfg: LearnerConfig,
    policy: LinearPolicy,
    step: u64,
    steps_since_reset: u64,
    reset_epoch: u64,
    log_offset: u64,
    /// Id of the last checkpoint taken; 0 before the first.
    model_id: u64,
    journal: Vec<JournalRecord>,
    /// When set, resets come from the journal instead of the schedule.
    replaying: bool,
    progressive: PolicyValueEstimate,
    evaluator: PolicyEvaluator,
    invalid_data: u64,
    store: Option<Arc<dyn Store>>,
    pending: Vec<Checkpoint>,
    retry_at: u64,
    backoff: u64,
    checkpoint_failures: u64,
}

const MAX_BACKOFF_STEPS: u64 = 1024;

impl Learner {
    pub fn new(cfg: LearnerConfig) -> Result<Self, LearnError> {
        cfg.validate()?;
        let mut policy = LinearPolicy::zero(cfg.features);
        policy.bag = vec![Weights::new(); cfg.bag_size];
        Ok(Learner {
            cfg,
            policy,
            step: 0,
            steps_since_reset: 0,
            reset_epoch: 0,
            log_offset: 0,
            model_id: 0,
            journal: Vec::new(),
            replaying: false,
            progressive: PolicyValueEstimate::new("learned"),
            evaluator: PolicyEvaluator::new(),
            invalid_data: 0,
            store: None,
            pending: Vec::new(),
            retry_at: 0,
            backoff: 1,
            checkpoint_failures: 0,
        })
    }

    pub fn with_store(mut self, store: Arc<dyn Store>) -> Self {
        self.store = Some(store);
        self
    }

    /// Continues from the store's latest checkpoint. The caller then feeds
    /// the exploration log from [`Learner::log_offset`] onwards.
    pub fn resume(cfg: LearnerConfig, store: Arc<dyn Store>) -> Result<Self, LearnError> {
        let mut learner = Learner::new(cfg)?.with_store(Arc::clone(&store));
        let Some(_) = store.latest_model_id()? else {
            return Ok(learner);
        };
        let (policy, header) = policy::decode_model(&store.get_model(None)?)?;
        let cursor = header.cursor.ok_or(LearnError::NoCursor(header.model_id))?;
        if policy.bag.len() != learner.cfg.bag_size || policy.features != learner.cfg.features {
            return Err(LearnError::Config(format!(
                "model {} was trained with a different feature map or bag size",
                header.model_id
            )));
        }
        learner.step = policy.trained_on_count;
        learner.model_id = policy.model_id;
        learner.policy = policy;
        learner.steps_since_reset = cursor.steps_since_reset;
        learner.reset_epoch = cursor.reset_epoch;
        learner.log_offset = cursor.log_offset;
        Ok(learner)
    }

    /// A learner that takes its resets from [`Learner::apply_reset`]
    /// instead of the configured schedule.
    pub(crate) fn for_replay(cfg: LearnerConfig) -> Result<Self, LearnError> {
        let mut l = Learner::new(cfg)?;
        l.replaying = true;
        Ok(l)
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    /// Current weights; `model_id` is that of the last checkpoint.
    pub fn policy(&self) -> &LinearPolicy {
        &self.policy
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log_offset(&self) -> u64 {
        self.log_offset
    }

    pub fn model_id(&self) -> u64 {
        self.model_id
    }

    pub fn cursor(&self) -> TrainingCursor {
        TrainingCursor {
            steps_since_reset: self.steps_since_reset,
            reset_epoch: self.reset_epoch,
            log_offset: self.log_offset,
        }
    }

    /// Journal records since the last checkpoint.
    pub fn journal_tail(&self) -> &[JournalRecord] {
        &self.journal
    }

    pub fn add_candidate(&mut self, name: impl Into<String>, policy: Box<dyn Policy>) {
        self.evaluator.add(name, policy);
    }

    pub fn evaluator(&self) -> &PolicyEvaluator {
        &self.evaluator
    }

    /// Progressive estimate of the learned policy: each event is scored by
    /// the weights as they were before training on it.
    pub fn progressive(&self) -> &PolicyValueEstimate {
        &self.progressive
    }

    /// Learning rate the next step would use, ignoring a pending reset.
    pub fn next_rate(&self) -> f64 {
        self.rate_at(self.steps_since_reset + 1)
    }

    fn rate_at(&self, t: u64) -> f64 {
        match self.cfg.rate_schedule {
            RateSchedule::Constant => self.cfg.learning_rate0,
            RateSchedule::InverseSqrt => self.cfg.learning_rate0 / (t as f64).sqrt(),
        }
    }

    pub fn safeguard_tripped(&self) -> bool {
        let Some(sg) = &self.cfg.safeguard else {
            return false;
        };
        let Some(base) = self.evaluator.get(&sg.baseline) else {
            return false;
        };
        if self.progressive.count < sg.min_count {
            return false;
        }
        match (self.progressive.estimate(), base.estimate()) {
            (Some(learned), Some(b)) => learned < b - sg.margin,
            _ => false,
        }
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            model_id: self.model_id,
            step: self.step,
            log_offset: self.log_offset,
            invalid_data: self.invalid_data,
            progressive: self.progressive.clone(),
            candidates: self.evaluator.estimates().to_vec(),
            safeguard_tripped: self.safeguard_tripped(),
            pending_checkpoints: self.pending.len(),
            checkpoint_failures: self.checkpoint_failures,
        }
    }

    fn validate(ji: &JoinedInteraction) -> Result<(), String> {
        let p = ji.probability;
        if !(p > 0.0 && p <= 1.0) {
            return Err(format!("probability {p} outside (0, 1]"));
        }
        if !ji.reward.get().is_finite() {
            return Err("reward is not finite".into());
        }
        ji.context.check(ji.action).map_err(|e| e.to_string())
    }

    pub(crate) fn apply_reset(&mut self, epoch: u64) {
        self.steps_since_reset = 0;
        self.reset_epoch = epoch;
        self.journal.push(JournalRecord::Reset {
            step: self.step + 1,
            epoch,
        });
    }

    fn scheduled_reset(&mut self, ji: &JoinedInteraction) {
        match self.cfg.reset_interval {
            Some(ResetInterval::Events { count }) if self.steps_since_reset >= count => {
                self.apply_reset(self.reset_epoch + 1);
            }
            Some(ResetInterval::Duration { ms }) => {
                let epoch = ji.decision_time.0 / ms;
                if epoch > self.reset_epoch {
                    self.apply_reset(epoch);
                }
            }
            _ => {}
        }
    }

    /// Trains on one interaction. Invalid interactions are counted and
    /// rejected without touching the weights; they still advance the log
    /// offset.
    pub fn train_step(&mut self, ji: &JoinedInteraction) -> Result<StepOutcome, LearnError> {
        self.log_offset += 1;
        if let Err(reason) = Self::validate(ji) {
            self.invalid_data += 1;
            self.journal.push(JournalRecord::Reject {
                key: ji.key.clone(),
                log_offset: self.log_offset,
            });
            log::warn!("rejecting interaction {}: {reason}", ji.key);
            return Err(LearnError::InvalidData {
                key: ji.key.clone(),
                reason,
            });
        }
        if !self.replaying {
            self.scheduled_reset(ji);
        }
        let p = ji.probability;
        let r = ji.reward.get();

        let greedy = policy::greedy_action(&self.policy, &ji.context);
        self.progressive.observe(greedy == ji.action, r, p);
        self.evaluator.observe(ji);

        let phi = featurize(&ji.context, ji.action, self.cfg.features)
            .expect("action checked during validation");
        self.steps_since_reset += 1;
        let eta = self.rate_at(self.steps_since_reset);
        let residual = r - self.policy.weights.dot(&phi);
        if !residual.is_finite() {
            return Err(LearnError::Diverged {
                step: self.step + 1,
                key: ji.key.clone(),
            });
        }
        self.policy.weights.add_scaled(&phi, eta * residual / p);

        for (m, w) in self.policy.bag.iter_mut().enumerate() {
            let mut prg = Prg::from_parts(&[b"bag", ji.key.as_str().as_bytes(), &(m as u64).to_le_bytes()]);
            let k = prg.poisson1();
            if k > 0 {
                let residual = r - w.dot(&phi);
                w.add_scaled(&phi, k as f64 * eta * residual / p);
            }
        }

        self.step += 1;
        self.policy.trained_on_count = self.step;
        self.journal.push(JournalRecord::Step {
            step: self.step,
            key: ji.key.clone(),
            model_id: self.model_id,
            digest: interaction_digest(ji),
        });

        let mut checkpointed = None;
        if self.store.is_some() {
            if matches!(self.cfg.checkpoint_interval, Some(n) if self.step.is_multiple_of(n)) {
                checkpointed = Some(self.checkpoint()?);
            } else if !self.pending.is_empty() && self.step >= self.retry_at {
                self.flush();
            }
        }
        Ok(StepOutcome {
            step: self.step,
            checkpointed,
        })
    }

    /// Snapshots the weights under the next model id. With a store the
    /// snapshot is written (journal segment first, then the model); on
    /// failure it is queued and retried with backoff while training goes
    /// on.
    pub fn checkpoint(&mut self) -> Result<u64, LearnError> {
        let cp = self.snapshot()?;
        let id = cp.model_id;
        if self.store.is_some() {
            self.pending.push(cp);
            self.flush();
        }
        Ok(id)
    }

    /// Like [`Learner::checkpoint`] but hands the snapshot to the caller
    /// instead of a store.
    pub fn snapshot(&mut self) -> Result<Checkpoint, LearnError> {
        self.model_id += 1;
        self.policy.model_id = self.model_id;
        self.journal.push(JournalRecord::Checkpoint {
            model_id: self.model_id,
            step: self.step,
        });
        let model = encode_model(&self.policy, Some(self.cursor()))?;
        let journal = encode_journal(&std::mem::take(&mut self.journal));
        Ok(Checkpoint {
            model_id: self.model_id,
            model,
            journal,
            journal_written: false,
        })
    }

    /// Tries to write queued checkpoints in order. Returns how many remain.
    pub fn flush(&mut self) -> usize {
        let Some(store) = self.store.clone() else {
            return self.pending.len();
        };
        while let Some(cp) = self.pending.first_mut() {
            let res = (|| {
                if !cp.journal_written {
                    store.put_journal_segment(cp.model_id, &cp.journal)?;
                    cp.journal_written = true;
                }
                store.put_model(cp.model_id, &cp.model)
            })();
            match res {
                Ok(()) | Err(StoreError::Duplicate(_)) => {
                    self.pending.remove(0);
                    self.backoff = 1;
                }
                Err(e) => {
                    self.checkpoint_failures += 1;
                    self.retry_at = self.step + self.backoff;
                    log::warn!(
                        "checkpoint {} not written ({e}); retrying in {} steps",
                        cp.model_id,
                        self.backoff
                    );
                    self.backoff = (self.backoff * 2).min(MAX_BACKOFF_STEPS);
                    break;
                }
            }
        }
        self.pending.len()
    }

    pub fn pending_checkpoints(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FixedAction;
    use crate::store::MemStore;
    use crate::types::{ActionIndex, Context, EventTime, FeatureSet, Reward};

    fn ji(key: &str, ctx: Context, a: u32, p: f64, r: f64, t: u64) -> JoinedInteraction {
        JoinedInteraction {
            key: EventKey::new(key).unwrap(),
            context: ctx,
            action: ActionIndex::new(a).unwrap(),
            probability: p,
            reward: Reward::clamped(r).0,
            decision_time: EventTime(t),
            emit_time: EventTime(t + 10),
            model_id: 0,
        }
    }

    fn bias_only(key: &str, r: f64) -> JoinedInteraction {
        ji(key, Context::bare(1).unwrap(), 1, 1.0, r, 0)
    }

    #[test]
    fn single_step_arithmetic() {
        let mut l = Learner::new(LearnerConfig::constant(0.1)).unwrap();
        l.train_step(&bias_only("a", 1.0)).unwrap();
        let w = l.policy().weights.get(crate::features::bias_id());
        assert_eq!(w, 0.1);
    }

    #[test]
    fn fixed_point() {
        let mut l = Learner::new(LearnerConfig::constant(0.1)).unwrap();
        l.train_step(&bias_only("a", 0.0)).unwrap();
        assert_eq!(l.policy().weights.get(crate::features::bias_id()), 0.0);
    }

    #[test]
    fn importance_weight_scales_step() {
        let mut l = Learner::new(LearnerConfig::constant(0.1)).unwrap();
        l.train_step(&ji("a", Context::bare(2).unwrap(), 2, 0.5, 1.0, 0)).unwrap();
        assert!((l.policy().weights.get(crate::features::bias_id()) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_reported() {
        // Bias only: each step multiplies the residual by 1 - η/p = -99.
        let mut l = Learner::new(LearnerConfig::constant(1.0)).unwrap();
        let err = (0..400)
            .map(|i| l.train_step(&ji(&format!("k{i}"), Context::bare(1).unwrap(), 1, 0.01, 1.0, i)))
            .find_map(Result::err)
            .expect("the weights blow up");
        assert!(matches!(err, LearnError::Diverged { .. }), "{err}");
    }

    #[test]
    fn zero_probability_rejected() {
        let mut l = Learner::new(LearnerConfig::constant(0.1)).unwrap();
        let bad = ji("a", Context::bare(1).unwrap(), 1, 0.0, 1.0, 0);
        assert!(matches!(l.train_step(&bad), Err(LearnError::InvalidData { .. })));
        assert_eq!(l.metrics().invalid_data, 1);
        assert_eq!(l.step(), 0);
        assert_eq!(l.log_offset(), 1);
        assert!(l.policy().weights.is_empty());
    }

    #[test]
    fn inverse_sqrt_and_event_resets() {
        let mut cfg = LearnerConfig::constant(1.0);
        cfg.rate_schedule = RateSchedule::InverseSqrt;
        cfg.reset_interval = Some(ResetInterval::Events { count: 3 });
        let mut l = Learner::new(cfg).unwrap();
        let first = l.next_rate();
        assert_eq!(first, 1.0);
        for i in 0..3 {
            l.train_step(&bias_only(&format!("k{i}"), 0.0)).unwrap();
        }
        assert_eq!(l.next_rate(), 0.5);
        // The fourth step resets before updating.
        l.train_step(&bias_only("k3", 0.0)).unwrap();
        assert!(l
            .journal_tail()
            .iter()
            .any(|r| matches!(r, JournalRecord::Reset { step: 4, epoch: 1 })));
        assert_eq!(l.cursor().steps_since_reset, 1);
    }

    #[test]
    fn rate_right_after_reset_equals_first_rate() {
        let mut cfg = LearnerConfig::constant(0.3);
        cfg.rate_schedule = RateSchedule::InverseSqrt;
        cfg.reset_interval = Some(ResetInterval::Events { count: 5 });
        let mut a = Learner::new(cfg.clone()).unwrap();
        let mut b = Learner::new(cfg).unwrap();
        for i in 0..5 {
            a.train_step(&bias_only(&format!("k{i}"), 0.3)).unwrap();
        }
        // From identical weights, the post-reset step must match a fresh
        // learner's first step.
        b.policy.weights = a.policy.weights.clone();
        let before = a.policy.weights.clone();
        a.train_step(&bias_only("x", 1.0)).unwrap();
        b.train_step(&bias_only("x", 1.0)).unwrap();
        assert_ne!(a.policy.weights, before);
        assert_eq!(a.policy.weights, b.policy.weights);
    }

    #[test]
    fn duration_resets_follow_epochs() {
        let mut cfg = LearnerConfig::constant(1.0);
        cfg.rate_schedule = RateSchedule::InverseSqrt;
        cfg.reset_interval = Some(ResetInterval::Duration { ms: 100 });
        let mut l = Learner::new(cfg).unwrap();
        for (i, t) in [0, 50, 99, 100, 150, 420].into_iter().enumerate() {
            l.train_step(&ji(&format!("k{i}"), Context::bare(1).unwrap(), 1, 1.0, 0.0, t))
                .unwrap();
        }
        let resets: Vec<_> = l
            .journal_tail()
            .iter()
            .filter_map(|r| match r {
                JournalRecord::Reset { step, epoch } => Some((*step, *epoch)),
                _ => None,
            })
            .collect();
        assert_eq!(resets, vec![(4, 1), (6, 4)]);
    }

    #[test]
    fn evaluate_policies_hand_example() {
        let mut ev = PolicyEvaluator::new();
        ev.add("one", Box::new(FixedAction(ActionIndex::new(1).unwrap())));
        ev.observe(&ji("a", Context::bare(4).unwrap(), 1, 0.5, 1.0, 0));
        ev.observe(&ji("b", Context::bare(4).unwrap(), 2, 0.25, 1.0, 0));
        let e = &ev.estimates()[0];
        assert_eq!(e.estimate(), Some(1.0));
        assert_eq!(e.min_prob_seen, 0.25);
    }

    #[test]
    fn estimate_merge_is_order_independent() {
        let mut a = PolicyValueEstimate::new("p");
        let mut b = PolicyValueEstimate::new("p");
        a.observe(true, 1.0, 0.5);
        b.observe(false, 1.0, 0.1);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.count, 2);
    }

    #[test]
    fn ci_width_formula() {
        let w = ci_width(CiParams::with_k(100), 0.05, 10_000);
        assert!((w - 0.1744).abs() < 1e-4, "{w}");
    }

    #[test]
    fn checkpoints_get_monotone_ids() {
        let store = Arc::new(MemStore::new());
        let mut l = Learner::new(LearnerConfig::constant(0.1))
            .unwrap()
            .with_store(store.clone());
        assert_eq!(l.checkpoint().unwrap(), 1);
        let (m1, _) = policy::decode_model(&store.get_model(Some(1)).unwrap()).unwrap();
        assert!(m1.weights.is_empty());
        assert_eq!(l.checkpoint().unwrap(), 2);
        let (m2, _) = policy::decode_model(&store.get_model(Some(2)).unwrap()).unwrap();
        assert_eq!(m1.weights, m2.weights);
        assert_eq!(store.latest_model_id().unwrap(), Some(2));
    }

    #[test]
    fn cadence_checkpoints() {
        let store = Arc::new(MemStore::new());
        let mut cfg = LearnerConfig::constant(0.1);
        cfg.checkpoint_interval = Some(2);
        let mut l = Learner::new(cfg).unwrap().with_store(store.clone());
        let outs: Vec<_> = (0..5)
            .map(|i| l.train_step(&bias_only(&format!("k{i}"), 1.0)).unwrap().checkpointed)
            .collect();
        assert_eq!(outs, vec![None, Some(1), None, Some(2), None]);
        let segs = store.journal_segments().unwrap();
        assert_eq!(segs.len(), 2);
        let recs = decode_journal(&segs[1].1).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(matches!(recs[2], JournalRecord::Checkpoint { model_id: 2, step: 4 }));
    }

    #[test]
    fn store_failure_is_retried() {
        let store = Arc::new(MemStore::new());
        let mut l = Learner::new(LearnerConfig::constant(0.1))
            .unwrap()
            .with_store(store.clone());
        store.set_available(false);
        assert_eq!(l.checkpoint().unwrap(), 1);
        assert_eq!(l.pending_checkpoints(), 1);
        // Training continues while the store is down.
        for i in 0..3 {
            l.train_step(&bias_only(&format!("k{i}"), 1.0)).unwrap();
        }
        assert_eq!(store.latest_model_id().unwrap_or(None), None);
        store.set_available(true);
        for i in 3..10 {
            l.train_step(&bias_only(&format!("k{i}"), 1.0)).unwrap();
        }
        assert_eq!(l.pending_checkpoints(), 0);
        assert_eq!(store.latest_model_id().unwrap(), Some(1));
        assert!(l.metrics().checkpoint_failures >= 1);
    }

    #[test]
    fn resume_continues_bit_exactly() {
        let ctx = Context::new(
            FeatureSet::new().with("user", "u1", 1.0),
            vec![
                FeatureSet::new().with("item", "a", 1.0),
                FeatureSet::new().with("item", "b", 1.0),
            ],
        )
        .unwrap();
        let data: Vec<_> = (0..40)
            .map(|i| ji(&format!("k{i}"), ctx.clone(), 1 + (i % 2), 0.5, (i % 3) as f64 / 2.0, i as u64))
            .collect();
        let mut cfg = LearnerConfig::constant(0.05);
        cfg.rate_schedule = RateSchedule::InverseSqrt;
        cfg.reset_interval = Some(ResetInterval::Events { count: 7 });
        cfg.checkpoint_interval = Some(10);
        cfg.bag_size = 3;

        let full = Arc::new(MemStore::new());
        let mut l = Learner::new(cfg.clone()).unwrap().with_store(full.clone());
        for d in &data {
            l.train_step(d).unwrap();
        }

        let crashed = Arc::new(MemStore::new());
        let mut l = Learner::new(cfg.clone()).unwrap().with_store(crashed.clone());
        for d in &data[..25] {
            l.train_step(d).unwrap();
        }
        drop(l);
        let mut l = Learner::resume(cfg, crashed.clone()).unwrap();
        assert_eq!(l.log_offset(), 20);
        for d in &data[l.log_offset() as usize..] {
            l.train_step(d).unwrap();
        }
        for id in 1..=4 {
            assert_eq!(full.get_model(Some(id)).unwrap(), crashed.get_model(Some(id)).unwrap());
        }
    }

    #[test]
    fn progressive_uses_pre_update_weights() {
        let mut l = Learner::new(LearnerConfig::constant(0.5)).unwrap();
        // Zero weights pick action 1 by the tie rule.
        l.train_step(&ji("a", Context::bare(2).unwrap(), 1, 0.5, 1.0, 0)).unwrap();
        assert_eq!(l.progressive().estimate(), Some(2.0));
    }

    #[test]
    fn safeguard_flags_underperformance() {
        let mut cfg = LearnerConfig::constant(0.01);
        cfg.safeguard = Some(SafeguardConfig {
            baseline: "two".into(),
            margin: 0.1,
            min_count: 10,
        });
        let mut l = Learner::new(cfg).unwrap();
        l.add_candidate("two", Box::new(FixedAction(ActionIndex::new(2).unwrap())));
        // Bare contexts score every action alike, so the learner keeps
        // picking action 1 while action 2 is the one that pays.
        for i in 0..20 {
            let a = if i % 2 == 0 { 1 } else { 2 };
            let r = if a == 2 { 1.0 } else { 0.0 };
            l.train_step(&ji(&format!("k{i}"), Context::bare(2).unwrap(), a, 0.5, r, 0)).unwrap();
        }
        let m = l.metrics();
        assert!(m.safeguard_tripped, "{m:?}");
    }

    #[test]
    fn journal_roundtrip() {
        let recs = vec![
            JournalRecord::Reset { step: 1, epoch: 3 },
            JournalRecord::Step {
                step: 1,
                key: EventKey::new("k").unwrap(),
                model_id: 0,
                digest: "00".into(),
            },
            JournalRecord::Checkpoint { model_id: 1, step: 1 },
        ];
        let bytes = encode_journal(&recs);
        assert_eq!(decode_journal(&bytes).unwrap(), recs);
        assert!(std::str::from_utf8(&bytes)
            .unwrap()
            .starts_with(r#"{"type":"reset","step":1,"epoch":3}"#));
    }
}
