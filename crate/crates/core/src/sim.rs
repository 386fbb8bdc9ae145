//! Local-mode loop under simulated time: a synthetic environment feeds
//! decisions through the gateway, rewards come back after per-action
//! delays, and join, learner, store and model refresh all run on the same
//! clock.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ValidationError;
use crate::exploration::{Algorithm, DefaultPolicy, ExplorationConfig, Explorer};
use crate::gateway::{ActionSpec, DecisionRequest, Gateway, GatewayError, RewardRequest};
use crate::join::{JoinConfig, JoinMetrics, JoinService, JoinedInteraction};
use crate::learner::{LearnError, Learner, LearnerConfig, MetricsSnapshot, PolicyValueEstimate};
use crate::offline::Dataset;
use crate::policy::{FixedAction, Policy};
use crate::prg::Prg;
use crate::store::{Store, StoreError};
use crate::types::{ActionIndex, Context, EventKey, EventTime, FeatureSet, Reward};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid environment: {0}")]
    Environment(String),
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// From event `at_event` on, replace the reward table and/or the archetype
/// mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub at_event: u64,
    #[serde(default)]
    pub rewards: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub archetype_weights: Option<Vec<f64>>,
}

/// Reward arrival delay, uniform in `[min_ms, max_ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayRange {
    pub min_ms: u64,
    pub max_ms: u64,
}

/// Contexts come from a finite set of archetypes; the reward of action `a`
/// for archetype `i` is Bernoulli(`rewards[i][a]`).
///
/// Empty `archetypes` / `action_features` default to one-hot features
/// `user:u<i>` and `item:i<j>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvironment {
    #[serde(default)]
    pub archetypes: Vec<FeatureSet>,
    #[serde(default)]
    pub action_features: Vec<FeatureSet>,
    pub archetype_weights: Vec<f64>,
    pub rewards: Vec<Vec<f64>>,
    #[serde(default)]
    pub drift: Vec<DriftPoint>,
    /// One range per action; absent means rewards arrive immediately.
    #[serde(default)]
    pub reward_delay: Option<Vec<DelayRange>>,
}

/// Reward table and archetype mix in force at some event.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub archetype_weights: Vec<f64>,
    pub rewards: Vec<Vec<f64>>,
}

impl Phase {
    /// Closed-form value of a deterministic policy.
    pub fn value(&self, contexts: &[Context], policy: &dyn Policy) -> f64 {
        self.weighted(|i| self.rewards[i][policy.choose(&contexts[i]).zero_based()])
    }

    /// Best achievable value: the per-archetype best action.
    pub fn optimal_value(&self) -> f64 {
        self.weighted(|i| self.rewards[i].iter().copied().fold(f64::MIN, f64::max))
    }

    pub fn uniform_value(&self) -> f64 {
        self.weighted(|i| self.rewards[i].iter().sum::<f64>() / self.rewards[i].len() as f64)
    }

    /// Value of ε-greedy exploration around `policy`:
    /// `(1 − ε) V(π) + ε V(uniform)`.
    pub fn mixture_value(&self, contexts: &[Context], policy: &dyn Policy, epsilon0: f64) -> f64 {
        (1.0 - epsilon0) * self.value(contexts, policy) + epsilon0 * self.uniform_value()
    }

    pub fn mixture_optimum(&self, epsilon0: f64) -> f64 {
        (1.0 - epsilon0) * self.optimal_value() + epsilon0 * self.uniform_value()
    }

    fn weighted(&self, f: impl Fn(usize) -> f64) -> f64 {
        let total: f64 = self.archetype_weights.iter().sum();
        self.archetype_weights
            .iter()
            .enumerate()
            .map(|(i, w)| w / total * f(i))
            .sum()
    }
}

fn one_hot(ns: &str, prefix: &str, i: usize) -> FeatureSet {
    FeatureSet::new().with(ns, &format!("{prefix}{i}"), 1.0)
}

impl SyntheticEnvironment {
    pub fn new(archetype_weights: Vec<f64>, rewards: Vec<Vec<f64>>) -> Result<Self, SimError> {
        let mut env = SyntheticEnvironment {
            archetypes: Vec::new(),
            action_features: Vec::new(),
            archetype_weights,
            rewards,
            drift: Vec::new(),
            reward_delay: None,
        };
        env.normalize()?;
        Ok(env)
    }

    /// Fills default features and checks every table.
    pub fn normalize(&mut self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Environment(m));
        let n_arch = self.archetype_weights.len();
        if n_arch == 0 {
            return bad("no archetypes".into());
        }
        let n_actions = self.rewards.first().map_or(0, Vec::len);
        if n_actions == 0 {
            return bad("no actions".into());
        }
        if self.archetypes.is_empty() {
            self.archetypes = (0..n_arch).map(|i| one_hot("user", "u", i)).collect();
        }
        if self.action_features.is_empty() {
            self.action_features = (0..n_actions).map(|j| one_hot("item", "i", j)).collect();
        }
        if self.archetypes.len() != n_arch {
            return bad(format!("{} archetypes but {n_arch} weights", self.archetypes.len()));
        }
        if self.action_features.len() != n_actions {
            return bad(format!(
                "{} action feature sets but {n_actions} actions",
                self.action_features.len()
            ));
        }
        self.drift.sort_by_key(|d| d.at_event);
        let check_weights = |w: &[f64]| -> Result<(), SimError> {
            if w.len() != n_arch || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!("archetype weights {w:?} invalid for {n_arch} archetypes"));
            }
            Ok(())
        };
        let check_table = |t: &[Vec<f64>]| -> Result<(), SimError> {
            if t.len() != n_arch || t.iter().any(|row| row.len() != n_actions) {
                return bad(format!("reward table must be {n_arch}x{n_actions}"));
            }
            if t.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
                return bad("reward probabilities must lie in [0, 1]".into());
            }
            Ok(())
        };
        check_weights(&self.archetype_weights)?;
        check_table(&self.rewards)?;
        for d in &self.drift {
            if let Some(w) = &d.archetype_weights {
                check_weights(w)?;
            }
            if let Some(t) = &d.rewards {
                check_table(t)?;
            }
        }
        if let Some(delays) = &self.reward_delay {
            if delays.len() != n_actions || delays.iter().any(|d| d.min_ms > d.max_ms) {
                return bad("reward_delay needs one valid range per action".into());
            }
        }
        for fs in self.archetypes.iter().chain(&self.action_features) {
            fs.validate()?;
        }
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.action_features.len()
    }

    pub fn archetype_count(&self) -> usize {
        self.archetypes.len()
    }

    /// The context seen for archetype `i`.
    pub fn context(&self, i: usize) -> Context {
        Context::new(self.archetypes[i].clone(), self.action_features.clone()).expect("validated features")
    }

    pub fn contexts(&self) -> Vec<Context> {
        (0..self.archetype_count()).map(|i| self.context(i)).collect()
    }

    pub fn phase_at(&self, event: u64) -> Phase {
        let mut p = Phase {
            archetype_weights: self.archetype_weights.clone(),
            rewards: self.rewards.clone(),
        };
        for d in self.drift.iter().take_while(|d| d.at_event <= event) {
            if let Some(w) = &d.archetype_weights {
                p.archetype_weights = w.clone();
            }
            if let Some(t) = &d.rewards {
                p.rewards = t.clone();
            }
        }
        p
    }

    /// Draws event `i`: the archetype, the uniform that decides the reward
    /// and the uniform for the reward delay. Each event has its own PRG
    /// stream, so draws do not depend on what was chosen before.
    pub fn draw(&self, seed: u64, i: u64) -> EnvDraw {
        let mut prg = Prg::from_parts(&[b"env", &seed.to_le_bytes(), &i.to_le_bytes()]);
        let phase_weights = self.phase_at(i).archetype_weights;
        let archetype = prg.weighted_index(&phase_weights);
        EnvDraw {
            archetype,
            reward_u: prg.next_f64(),
            delay_u: prg.next_f64(),
        }
    }

    pub fn reward(&self, draw: &EnvDraw, action: ActionIndex, event: u64) -> f64 {
        let p = self.phase_at(event).rewards[draw.archetype][action.zero_based()];
        if draw.reward_u < p {
            1.0
        } else {
            0.0
        }
    }

    pub fn delay_ms(&self, draw: &EnvDraw, action: ActionIndex) -> u64 {
        match &self.reward_delay {
            None => 0,
            Some(d) => {
                let r = d[action.zero_based()];
                r.min_ms + ((r.max_ms - r.min_ms + 1) as f64 * draw.delay_u) as u64
            }
        }
        .min(self.max_delay_ms())
    }

    pub fn max_delay_ms(&self) -> u64 {
        self.reward_delay
            .as_ref()
            .map_or(0, |d| d.iter().map(|r| r.max_ms).max().unwrap_or(0))
    }

    // ---- presets ----

    /// Three archetypes (mix 0.5 / 0.3 / 0.2) and four actions. Always
    /// choosing action 2 is worth 0.62; the best policy 0.78.
    pub fn stationary() -> Self {
        SyntheticEnvironment::new(
            vec![0.5, 0.3, 0.2],
            vec![
                vec![0.2, 0.7, 0.3, 0.1],
                vec![0.3, 0.6, 0.9, 0.2],
                vec![0.8, 0.45, 0.2, 0.3],
            ],
        )
        .expect("preset is valid")
    }

    /// Two actions paying 0.1 and 0.9 for every archetype.
    pub fn two_action() -> Self {
        SyntheticEnvironment::new(vec![1.0; 4], vec![vec![0.1, 0.9]; 4]).expect("preset is valid")
    }

    /// Every action pays with probability `p`.
    pub fn constant(n_actions: usize, p: f64) -> Self {
        SyntheticEnvironment::new(vec![1.0], vec![vec![p; n_actions]]).expect("preset is valid")
    }

    /// Four user archetypes over ten actions; archetype `i` prefers action
    /// `i` (0.6 against 0.3). The archetype mix drifts: archetype 0 makes up
    /// 85% of traffic for the first 70% of `n_events`, archetype 1 until 85%,
    /// archetype 2 after that. Per-archetype rewards never change, so a
    /// contextual policy stays valid while the best context-free action
    /// moves.
    pub fn covariate_drift(n_events: u64) -> Self {
        let (n_users, n_actions) = (4, 10);
        let rewards = (0..n_users)
            .map(|i| (0..n_actions).map(|j| if i == j { 0.6 } else { 0.3 }).collect())
            .collect();
        let mix = |m: usize| -> Vec<f64> { (0..n_users).map(|k| if k == m { 0.85 } else { 0.05 }).collect() };
        let mut env = SyntheticEnvironment::new(mix(0), rewards).expect("preset is valid");
        env.drift = [(1, 70), (2, 85)]
            .into_iter()
            .map(|(m, pct)| DriftPoint {
                at_event: n_events * pct / 100,
                rewards: None,
                archetype_weights: Some(mix(m)),
            })
            .collect();
        env
    }

    /// Three equally likely archetypes, four actions. Archetype `i` pays 0.8
    /// on its favourite action and 0.2 elsewhere. The favourite starts as
    /// action `i`; at `segment_len` archetype 2 switches, at
    /// `2 * segment_len` archetype 1 switches too.
    pub fn table_switch(segment_len: u64) -> Self {
        let table = |fav: [usize; 3]| -> Vec<Vec<f64>> {
            fav.iter()
                .map(|&f| (0..4).map(|j| if j == f { 0.8 } else { 0.2 }).collect())
                .collect()
        };
        let mut env = SyntheticEnvironment::new(vec![1.0; 3], table([0, 1, 2])).expect("preset is valid");
        env.drift = vec![
            DriftPoint {
                at_event: segment_len,
                rewards: Some(table([0, 1, 3])),
                archetype_weights: None,
            },
            DriftPoint {
                at_event: 2 * segment_len,
                rewards: Some(table([0, 3, 3])),
                archetype_weights: None,
            },
        ];
        env
    }

    pub fn preset(name: &str, n_events: u64) -> Option<Self> {
        Some(match name {
            "stationary" => Self::stationary(),
            "two-action" => Self::two_action(),
            "constant" => Self::constant(4, 0.5),
            "covariate-drift" => Self::covariate_drift(n_events),
            "table-switch" => Self::table_switch(n_events / 3 + 1),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 5] = ["stationary", "two-action", "constant", "covariate-drift", "table-switch"];
}

/// Random draws of one event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvDraw {
    pub archetype: usize,
    pub reward_u: f64,
    pub delay_u: f64,
}

/// Logs `n` events under a fixed exploration configuration without a
/// learner in the loop. Event `i` happens at `i` ms.
pub fn log_fixed_policy(
    env: &SyntheticEnvironment,
    cfg: &ExplorationConfig,
    model: Option<&crate::policy::LinearPolicy>,
    n: u64,
    seed: u64,
) -> Result<Dataset, SimError> {
    let contexts = env.contexts();
    let mut out = Vec::with_capacity(n as usize);
    for i in 0..n {
        let draw = env.draw(seed, i);
        let key = EventKey::new(format!("e{i}"))?;
        let (a, ev) = crate::exploration::choose_action(cfg, model, contexts[draw.archetype].clone(), key, EventTime(i))
            .map_err(|e| SimError::Config(e.to_string()))?;
        out.push(JoinedInteraction {
            key: ev.key,
            context: ev.context,
            action: a,
            probability: ev.probability.get(),
            reward: Reward::clamped(env.reward(&draw, a, i)).0,
            decision_time: EventTime(i),
            emit_time: EventTime(i),
            model_id: ev.model_id,
        });
    }
    Dataset::new(out).map_err(|e| SimError::Config(e.to_string()))
}

/// Loop parameters. All times are simulated milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_app")]
    pub app_id: String,
    pub epsilon0: f64,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    /// Action used before the first model is deployed; uniform when absent.
    #[serde(default)]
    pub default_action: Option<ActionIndex>,
    pub experimental_unit_ms: u64,
    #[serde(default = "default_interval")]
    pub decision_interval_ms: u64,
    pub refresh_interval_ms: u64,
    pub checkpoint_interval_ms: u64,
    /// Events per reporting window.
    #[serde(default = "default_window")]
    pub report_window: u64,
    /// Disable only to demonstrate reward-delay bias.
    #[serde(default = "default_true")]
    pub uniform_delay: bool,
    /// Fixed action the learned policy is compared against.
    #[serde(default = "default_baseline")]
    pub baseline_action: ActionIndex,
    pub learner: LearnerConfig,
}

fn default_app() -> String {
    "sim".into()
}
fn default_algorithm() -> Algorithm {
    Algorithm::EpsilonGreedy
}
fn default_interval() -> u64 {
    10
}
fn default_window() -> u64 {
    5000
}
fn default_true() -> bool {
    true
}
fn default_baseline() -> ActionIndex {
    ActionIndex::from_zero_based(0)
}

impl LoopConfig {
    /// ε-greedy loop with a constant learning rate and 1 s join window,
    /// refresh and checkpoint cadence at 10 ms per decision.
    pub fn standard(epsilon0: f64, learning_rate0: f64) -> Self {
        LoopConfig {
            seed: 0,
            app_id: default_app(),
            epsilon0,
            algorithm: Algorithm::EpsilonGreedy,
            default_action: None,
            experimental_unit_ms: 1_000,
            decision_interval_ms: 10,
            refresh_interval_ms: 1_000,
            checkpoint_interval_ms: 1_000,
            report_window: 5_000,
            uniform_delay: true,
            baseline_action: default_baseline(),
            learner: LearnerConfig::constant(learning_rate0),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: LoopConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("loop config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_owned()));
        if self.experimental_unit_ms == 0 {
            return bad("experimental_unit_ms must be positive");
        }
        if self.decision_interval_ms == 0 {
            return bad("decision_interval_ms must be positive");
        }
        if self.checkpoint_interval_ms == 0 {
            return bad("checkpoint_interval_ms must be positive");
        }
        if self.report_window == 0 {
            return bad("report_window must be positive");
        }
        self.exploration().validate()?;
        self.learner.validate()?;
        Ok(())
    }

    pub fn exploration(&self) -> ExplorationConfig {
        ExplorationConfig {
            app_id: self.app_id.clone(),
            epsilon0: self.epsilon0,
            algorithm: self.algorithm.clone(),
            default_policy: self.default_action.map(DefaultPolicy::Action),
            model_refresh_interval_ms: self.refresh_interval_ms,
            floor_bag_votes: true,
        }
    }

    pub fn join(&self) -> JoinConfig {
        JoinConfig {
            uniform_delay: self.uniform_delay,
            ..JoinConfig::new(self.experimental_unit_ms)
        }
    }

    /// The learner config actually used: Bag exploration needs bootstrap
    /// members.
    pub fn effective_learner(&self) -> LearnerConfig {
        let mut l = self.learner.clone();
        if let Algorithm::Bag { bag_size } = self.algorithm {
            l.bag_size = bag_size;
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowReport {
    /// Events decided so far.
    pub events: u64,
    pub mean_reward: f64,
    /// IPS of the learned policy over interactions trained in this window
    /// (progressive, pre-update).
    pub learned_ips: Option<f64>,
    pub baseline_ips: Option<f64>,
    pub model_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub events: u64,
    pub cumulative_reward: f64,
    pub mean_reward: f64,
    pub windows: Vec<WindowReport>,
    pub checkpoints: u64,
    pub deploys: u64,
    /// Simulated time from the newest decision a deployed model was trained
    /// on to its deployment.
    pub learning_latency_ms_mean: Option<f64>,
    pub learning_latency_ms_max: Option<u64>,
    /// Closed-form value of the final greedy policy in the final phase.
    pub final_policy_value: f64,
    pub final_mixture_value: f64,
    pub optimal_value: f64,
    pub mixture_optimum: f64,
    pub uniform_value: f64,
    pub join: JoinMetrics,
    pub learner: MetricsSnapshot,
}

impl MetricsReport {
    pub fn windows_csv(&self) -> String {
        let mut out = String::from("events,mean_reward,learned_ips,baseline_ips,model_id\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for w in &self.windows {
            out.push_str(&format!(
                "{},{:.6},{},{},{}\n",
                w.events,
                w.mean_reward,
                opt(w.learned_ips),
                opt(w.baseline_ips),
                w.model_id
            ));
        }
        out
    }
}

fn window_delta(now: &PolicyValueEstimate, before: &PolicyValueEstimate) -> Option<f64> {
    let n = now.count - before.count;
    (n > 0).then(|| (now.ips_sum - before.ips_sum) / n as f64)
}

struct Pipeline {
    rx: mpsc::Receiver<crate::exploration::Observation>,
    join: JoinService,
    learner: Learner,
    newest_trained: u64,
}

impl Pipeline {
    fn pump(&mut self, now: u64) -> Result<(), SimError> {
        while let Ok(obs) = self.rx.try_recv() {
            self.join.ingest(obs);
        }
        for ji in self.join.advance(EventTime(now))? {
            match self.learner.train_step(&ji) {
                Ok(_) => self.newest_trained = self.newest_trained.max(ji.decision_time.0),
                Err(LearnError::InvalidData { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

/// Runs `n_events` decisions through the full loop. Deterministic for a
/// fixed config, environment and store backend.
pub fn run_loop(
    env: &SyntheticEnvironment,
    cfg: &LoopConfig,
    n_events: u64,
    store: Arc<dyn Store>,
) -> Result<MetricsReport, SimError> {
    cfg.validate()?;
    let n_actions = env.action_count();
    let (tx, rx) = mpsc::channel();
    let explorer = Arc::new(Explorer::new(cfg.exploration())?.with_sink(tx));
    let gateway = Gateway::new(Arc::clone(&explorer));
    let mut learner = Learner::new(cfg.effective_learner())?.with_store(Arc::clone(&store));
    learner.add_candidate("baseline", Box::new(FixedAction(cfg.baseline_action)));
    let mut pipe = Pipeline {
        rx,
        join: JoinService::new(cfg.join()).with_store(Arc::clone(&store)),
        learner,
        newest_trained: 0,
    };

    let action_ids: Vec<String> = (1..=n_actions).map(|a| format!("a{a}")).collect();
    let requests: Vec<DecisionRequest> = (0..env.archetype_count())
        .map(|i| DecisionRequest {
            app_id: cfg.app_id.clone(),
            event_id: None,
            shared: env.archetypes[i].clone(),
            actions: action_ids
                .iter()
                .zip(&env.action_features)
                .map(|(id, f)| ActionSpec {
                    id: id.clone(),
                    features: f.clone(),
                })
                .collect(),
        })
        .collect();

    // (due time, seq) → reward report
    let mut in_flight: BTreeMap<(u64, u64), RewardRequest> = BTreeMap::new();
    let mut newest_in_model: HashMap<u64, u64> = HashMap::new();
    let mut latencies: Vec<u64> = Vec::new();
    let mut windows = Vec::new();
    let (mut total, mut window_total, mut window_start) = (0.0, 0.0, 0u64);
    let mut deploys = 0;
    let mut checkpoints = 0;
    let mut last_checkpoint = 0u64;
    let mut window_prog = pipe.learner.progressive().clone();
    let mut window_base = pipe.learner.evaluator().estimates()[0].clone();

    let deliver = |in_flight: &mut BTreeMap<(u64, u64), RewardRequest>, upto: u64| -> Result<(), SimError> {
        while let Some(entry) = in_flight.first_entry() {
            if entry.key().0 > upto {
                break;
            }
            let ((t, _), req) = entry.remove_entry();
            gateway.handle_reward(&req, EventTime(t))?;
        }
        Ok(())
    };

    for i in 0..n_events {
        let now = i * cfg.decision_interval_ms;
        if let Some(id) = explorer.maybe_refresh(EventTime(now), store.as_ref()) {
            deploys += 1;
            if let Some(newest) = newest_in_model.get(&id) {
                latencies.push(now - newest);
            }
        }
        let draw = env.draw(cfg.seed, i);
        let (_, event) = gateway.handle_decision(&requests[draw.archetype], EventTime(now))?;
        let r = env.reward(&draw, event.action, i);
        total += r;
        window_total += r;
        if r > 0.0 {
            let due = now + env.delay_ms(&draw, event.action);
            in_flight.insert(
                (due, i),
                RewardRequest {
                    event_id: event.key.to_string(),
                    reward: r,
                },
            );
        }
        deliver(&mut in_flight, now)?;
        pipe.pump(now)?;
        if now >= last_checkpoint + cfg.checkpoint_interval_ms {
            let id = pipe.learner.checkpoint()?;
            newest_in_model.insert(id, pipe.newest_trained);
            checkpoints += 1;
            last_checkpoint = now;
        }
        if (i + 1) % cfg.report_window == 0 || i + 1 == n_events {
            let prog = pipe.learner.progressive().clone();
            let base = pipe.learner.evaluator().estimates()[0].clone();
            windows.push(WindowReport {
                events: i + 1,
                mean_reward: window_total / (i + 1 - window_start) as f64,
                learned_ips: window_delta(&prog, &window_prog),
                baseline_ips: window_delta(&base, &window_base),
                model_id: explorer.current_model_id(),
            });
            window_prog = prog;
            window_base = base;
            window_total = 0.0;
            window_start = i + 1;
        }
    }

    // Drain: every reward arrives, every window closes.
    let end = n_events.saturating_sub(1) * cfg.decision_interval_ms + env.max_delay_ms() + cfg.experimental_unit_ms;
    deliver(&mut in_flight, u64::MAX)?;
    pipe.pump(end)?;
    pipe.learner.checkpoint()?;
    checkpoints += 1;
    pipe.learner.flush();

    let contexts = env.contexts();
    let phase = env.phase_at(n_events.saturating_sub(1));
    let final_policy = pipe.learner.policy().clone();
    let lat_mean = (!latencies.is_empty()).then(|| latencies.iter().sum::<u64>() as f64 / latencies.len() as f64);
    Ok(MetricsReport {
        events: n_events,
        cumulative_reward: total,
        mean_reward: if n_events > 0 { total / n_events as f64 } else { 0.0 },
        windows,
        checkpoints,
        deploys,
        learning_latency_ms_mean: lat_mean,
        learning_latency_ms_max: latencies.iter().copied().max(),
        final_policy_value: phase.value(&contexts, &final_policy),
        final_mixture_value: phase.mixture_value(&contexts, &final_policy, cfg.epsilon0),
        optimal_value: phase.optimal_value(),
        mixture_optimum: phase.mixture_optimum(cfg.epsilon0),
        uniform_value: phase.uniform_value(),
        join: pipe.join.metrics(),
        learner: pipe.learner.metrics(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemStore;

    #[test]
    fn stationary_closed_forms() {
        let env = SyntheticEnvironment::stationary();
        let p = env.phase_at(0);
        let v2 = p.value(&env.contexts(), &FixedAction(ActionIndex::new(2).unwrap()));
        assert!((v2 - 0.62).abs() < 1e-12);
        assert!((p.optimal_value() - 0.78).abs() < 1e-12);
        assert!((p.uniform_value() - 0.4).abs() < 1e-12);
        assert!((p.mixture_optimum(0.2) - 0.704).abs() < 1e-12);
    }

    #[test]
    fn drift_applies_in_order() {
        let env = SyntheticEnvironment::table_switch(100);
        assert_eq!(env.phase_at(99).rewards[2][2], 0.8);
        assert_eq!(env.phase_at(100).rewards[2][3], 0.8);
        assert_eq!(env.phase_at(200).rewards[1][3], 0.8);
        let cov = SyntheticEnvironment::covariate_drift(300);
        assert_eq!(cov.phase_at(209).archetype_weights[0], 0.85);
        assert_eq!(cov.phase_at(210).archetype_weights[1], 0.85);
        assert_eq!(cov.phase_at(255).archetype_weights[2], 0.85);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(SyntheticEnvironment::new(vec![1.0], vec![vec![1.5]]).is_err());
        assert!(SyntheticEnvironment::new(vec![1.0, 1.0], vec![vec![0.5]]).is_err());
        assert!(SyntheticEnvironment::new(vec![], vec![]).is_err());
    }

    #[test]
    fn loop_config_toml_roundtrip() {
        let cfg = LoopConfig::standard(0.2, 0.05);
        let text = cfg.to_toml();
        assert_eq!(LoopConfig::from_toml(&text).unwrap(), cfg);
        let minimal = r#"
            epsilon0 = 0.1
            experimental_unit_ms = 500
            refresh_interval_ms = 1000
            checkpoint_interval_ms = 2000
            [learner]
            learning_rate0 = 0.05
            rate_schedule = "inverse-sqrt"
            reset_interval = { kind = "events", count = 10000 }
        "#;
        let cfg = LoopConfig::from_toml(minimal).unwrap();
        assert_eq!(cfg.decision_interval_ms, 10);
        assert!(LoopConfig::from_toml("epsilon0 = 2.0").is_err());
    }

    #[test]
    fn loop_is_deterministic() {
        let env = SyntheticEnvironment::stationary();
        let mut cfg = LoopConfig::standard(0.2, 0.05);
        cfg.report_window = 500;
        let a = run_loop(&env, &cfg, 3000, Arc::new(MemStore::new())).unwrap();
        let b = run_loop(&env, &cfg, 3000, Arc::new(MemStore::new())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.windows.len(), 6);
        assert!(a.deploys > 0);
        assert_eq!(a.join.emitted, 3000);
    }

    #[test]
    fn every_decision_reaches_the_log() {
        let mut env = SyntheticEnvironment::stationary();
        env.reward_delay = Some(vec![DelayRange { min_ms: 0, max_ms: 400 }; 4]);
        let store = Arc::new(MemStore::new());
        let cfg = LoopConfig::standard(0.2, 0.05);
        let report = run_loop(&env, &cfg, 2000, store.clone()).unwrap();
        let log = store.read_all_interactions().unwrap();
        assert_eq!(log.len(), 2000);
        assert!(log.iter().all(|ji| ji.emit_time.0 - ji.decision_time.0 == 1000));
        let rewarded = log.iter().filter(|ji| ji.reward.get() > 0.0).count();
        assert_eq!(rewarded as f64, report.cumulative_reward);
    }
}
