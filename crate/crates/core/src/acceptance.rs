//! Runnable acceptance checks. Every check uses fixed seeds and compares
//! the library against a closed-form value or a separately written oracle.
//! The CLI runs them by suite name; the `acceptance` test target runs all.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::exploration::{
    DecisionEvent, DefaultPolicy, ExplorationConfig, Explorer, Observation,
    RewardObservation,
};
use crate::features::FeatureMap;
use crate::join::{JoinConfig, JoinService, JoinedInteraction};
use crate::learner::{CiParams, Learner, LearnerConfig};
use crate::offline::{
    discrepancy_experiment, ips_evaluate, staleness_experiment, Corruption, Dataset, ExperimentOptions,
    OverrideTarget,
};
use crate::policy::{decode_model, greedy_action, FnPolicy, LinearPolicy, Policy, Weights};
use crate::prg::Prg;
use crate::replay::verify_run;
use crate::service::{LocalService, ServiceConfig};
use crate::sim::{log_fixed_policy, run_loop, LoopConfig, SyntheticEnvironment};
use crate::store::{MemStore, Store};
use crate::types::{ActionIndex, Context, EventKey, EventTime, FeatureSet, Probability, Reward};

pub const SUITES: [&str; 10] = [
    "ips-correctness",
    "ips-unbiased",
    "simultaneous-eval",
    "exploration-law",
    "replay-bitexact",
    "join-semantics",
    "failure-injection",
    "staleness",
    "performance",
    "learning-efficacy",
];

#[derive(Debug, Error, PartialEq)]
pub enum AcceptanceError {
    #[error("unknown suite {0:?}; expected one of {list} or \"all\"", list = SUITES.join(", "))]
    UnknownSuite(String),
}

/// Outcome of one criterion.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    /// One line per measured quantity.
    pub details: Vec<String>,
    pub elapsed: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64()
        )?;
        for d in &self.details {
            write!(f, "\n       {d}")?;
        }
        Ok(())
    }
}

/// Collects measured lines and the verdict of the gating ones.
#[derive(Default)]
struct Report {
    ok: bool,
    lines: Vec<String>,
}

impl Report {
    fn new() -> Self {
        Report {
            ok: true,
            lines: Vec::new(),
        }
    }

    fn check(&mut self, cond: bool, line: String) {
        self.ok &= cond;
        self.lines.push(format!("{} {line}", if cond { "ok  " } else { "FAIL" }));
    }

    /// Reported but not gating.
    fn soft(&mut self, cond: bool, line: String) {
        self.lines.push(format!("{} {line}", if cond { "ok  " } else { "soft" }));
    }

    fn fail(&mut self, line: String) {
        self.check(false, line);
    }
}

/// Runs `name` (`all` for every suite) and returns one result per
/// criterion.
pub fn run(name: &str) -> Result<Vec<CheckResult>, AcceptanceError> {
    if name == "all" {
        return Ok((1..=SUITES.len()).map(run_criterion).collect());
    }
    let id = SUITES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| AcceptanceError::UnknownSuite(name.to_owned()))?;
    Ok(vec![run_criterion(id + 1)])
}

/// Runs criterion `id` (1-based).
///
/// # Panics
/// If `id` is not in `1..=10`.
pub fn run_criterion(id: usize) -> CheckResult {
    let start = Instant::now();
    let mut r = Report::new();
    match id {
        1 => ips_correctness(&mut r),
        2 => ips_unbiased(&mut r),
        3 => simultaneous_eval(&mut r),
        4 => exploration_law(&mut r),
        5 => replay_bitexact(&mut r),
        6 => join_semantics(&mut r),
        7 => failure_injection(&mut r),
        8 => staleness(&mut r),
        9 => performance(&mut r),
        10 => learning_efficacy(&mut r),
        _ => panic!("no acceptance criterion {id}"),
    }
    CheckResult {
        id,
        name: SUITES[id - 1],
        passed: r.ok,
        details: r.lines,
        elapsed: start.elapsed(),
    }
}

// ---------------------------------------------------------------------------
// helpers

fn action(i: usize) -> ActionIndex {
    ActionIndex::from_zero_based(i)
}

/// Value of a per-archetype action table, straight from the reward table.
fn table_value(weights: &[f64], rewards: &[Vec<f64>], table: &[usize]) -> f64 {
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .zip(rewards)
        .zip(table)
        .map(|((w, row), &a)| w / total * row[a])
        .sum()
}

/// Deterministic policy given as one action per archetype.
fn table_policy(env: &SyntheticEnvironment, table: Vec<usize>) -> impl Policy {
    let shared = env.archetypes.clone();
    FnPolicy(move |ctx: &Context| {
        let i = shared.iter().position(|a| a == ctx.shared()).unwrap_or(0);
        action(table[i])
    })
}

/// A linear model whose greedy action for archetype `i` is `table[i]`,
/// built on the default one-hot `user`/`item` features.
fn table_model(table: &[usize]) -> LinearPolicy {
    let weights = Weights::from_named(
        table
            .iter()
            .enumerate()
            .map(|(i, a)| (format!("shared/user:u{i}*action/item:i{a}"), 1.0)),
    );
    LinearPolicy::new(weights, FeatureMap::QUADRATIC)
}

fn ci_formula(c: f64, eps: f64, n: usize, k: f64, delta: f64) -> f64 {
    let log_term = k.ln() - delta.ln();
    (c * log_term / (eps * n as f64)).sqrt()
}

// ---------------------------------------------------------------------------
// 1. IPS correctness

fn ips_correctness(r: &mut Report) {
    let start = Instant::now();
    let mut prg = Prg::new(1);
    let mut mismatches = 0;
    let mut width_mismatches = 0;
    let mut events = 0;
    for d in 0..1000u64 {
        let n = 1 + prg.below(1000) as usize;
        let n_actions = 2 + prg.below(4) as usize;
        let mut recs = Vec::with_capacity(n);
        for i in 0..n {
            let shared = FeatureSet::new().with("u", &format!("x{}", prg.below(5)), 1.0);
            let ctx = Context::new(
                shared,
                (0..n_actions)
                    .map(|j| FeatureSet::new().with("i", &format!("a{j}"), 1.0))
                    .collect(),
            )
            .expect("context is valid");
            recs.push(JoinedInteraction {
                key: EventKey::new(format!("d{d}-{i}")).expect("key is valid"),
                context: ctx,
                action: action(prg.below(n_actions as u64) as usize),
                probability: (1 + prg.below(1000)) as f64 / 1000.0,
                reward: Reward::clamped(prg.next_f64()).0,
                decision_time: EventTime(i as u64),
                emit_time: EventTime(i as u64 + 1),
                model_id: 0,
            });
        }
        events += n;
        let ds = Dataset::new(recs).expect("generated data is valid");
        let salt = d as usize;
        let pick = move |ctx: &Context| -> ActionIndex {
            let x = ctx.shared().namespace("u").and_then(|ns| ns.keys().next().cloned()).unwrap_or_default();
            let v: usize = x[1..].parse().unwrap_or(0);
            action((v * 7 + salt) % ctx.action_count())
        };
        let got = ips_evaluate(&ds, &FnPolicy(pick), CiParams::default()).expect("non-empty");

        // Oracle: the sum written out directly.
        let mut sum = 0.0;
        let mut eps = f64::INFINITY;
        for rec in ds.records() {
            if pick(&rec.context) == rec.action {
                sum += rec.reward.get() / rec.probability;
            }
            eps = eps.min(rec.probability);
        }
        let expected = sum / ds.len() as f64;
        if got.estimate.to_bits() != expected.to_bits() {
            mismatches += 1;
        }
        let w = ci_formula(2.0, eps, ds.len(), 1.0, 0.05);
        if (got.ci_width - w).abs() > 1e-12 * w.max(1.0) {
            width_mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.check(mismatches == 0, format!("1000 datasets, {events} events: {mismatches} estimate mismatches (bit-exact)"));
    r.check(width_mismatches == 0, format!("confidence width mismatches: {width_mismatches}"));
    r.check(secs < 10.0, format!("runtime {secs:.2}s (limit 10s)"));
}

// ---------------------------------------------------------------------------
// 2. IPS unbiasedness

/// Best action per archetype in the stationary preset.
const STATIONARY_BEST: [usize; 3] = [1, 2, 0];

fn ips_unbiased(r: &mut Report) {
    let start = Instant::now();
    let env = SyntheticEnvironment::stationary();
    let logging = table_model(&STATIONARY_BEST);
    let cfg = ExplorationConfig::epsilon_greedy("acceptance", 0.2);
    // "Always action 2" (1-based).
    let candidate = table_policy(&env, vec![1; 3]);
    let v = table_value(&env.archetype_weights, &env.rewards, &[1, 1, 1]);
    r.check((v - 0.62).abs() < 1e-12, format!("closed-form V(always action 2) = {v:.4}"));

    let (runs, n) = (50, 20_000);
    let mut estimates = Vec::with_capacity(runs);
    let mut covered = 0;
    let mut width = 0.0;
    for seed in 0..runs as u64 {
        let ds = match log_fixed_policy(&env, &cfg, Some(&logging), n, 1000 + seed) {
            Ok(ds) => ds,
            Err(e) => return r.fail(format!("logging failed: {e}")),
        };
        let res = ips_evaluate(&ds, &candidate, CiParams::default()).expect("non-empty");
        width = res.ci_width;
        if (res.estimate - v).abs() <= res.ci_width {
            covered += 1;
        }
        estimates.push(res.estimate);
    }
    let mean = estimates.iter().sum::<f64>() / runs as f64;
    let rel = (mean - v).abs() / v;
    let secs = start.elapsed().as_secs_f64();
    r.check(rel <= 0.01, format!("mean of {runs} estimates {mean:.4}, off by {:.2}% (limit 1%)", rel * 100.0));
    r.check(
        covered * 100 >= 95 * runs,
        format!("{covered}/{runs} runs within width {width:.4} (need 95%)"),
    );
    r.check(secs < 60.0, format!("runtime {secs:.1}s (limit 60s)"));
}

// ---------------------------------------------------------------------------
// 3. Simultaneous evaluation of many policies

fn simultaneous_eval(r: &mut Report) {
    let env = SyntheticEnvironment::stationary();
    let logging = table_model(&STATIONARY_BEST);
    let cfg = ExplorationConfig::epsilon_greedy("acceptance", 0.2);
    let (k, runs, n) = (100, 100, 10_000);
    let mut prg = Prg::new(3);
    let tables: Vec<Vec<usize>> = (0..k)
        .map(|_| (0..env.archetype_count()).map(|_| prg.below(env.action_count() as u64) as usize).collect())
        .collect();
    let values: Vec<f64> = tables
        .iter()
        .map(|t| table_value(&env.archetype_weights, &env.rewards, t))
        .collect();
    let policies: Vec<_> = tables.iter().map(|t| table_policy(&env, t.clone())).collect();

    let mut all_inside = 0;
    let mut worst = 0.0f64;
    let mut width = 0.0;
    for seed in 0..runs {
        let ds = match log_fixed_policy(&env, &cfg, Some(&logging), n, 5000 + seed) {
            Ok(ds) => ds,
            Err(e) => return r.fail(format!("logging failed: {e}")),
        };
        let mut inside = true;
        for (p, v) in policies.iter().zip(&values) {
            let res = ips_evaluate(&ds, p, CiParams::with_k(k as u64)).expect("non-empty");
            width = res.ci_width;
            let err = (res.estimate - v).abs();
            worst = worst.max(err / res.ci_width);
            inside &= err <= res.ci_width;
        }
        all_inside += inside as usize;
    }
    let expected_width = ci_formula(2.0, 0.05, n as usize, k as f64, 0.05);
    r.check(
        (width - expected_width).abs() < 1e-12,
        format!("width for K={k}, N={n}, eps=0.05: {width:.4} (formula {expected_width:.4})"),
    );
    r.check(
        all_inside * 100 >= 95 * runs as usize,
        format!("{all_inside}/{runs} runs with all {k} policies inside (need 95%); worst error/width {worst:.2}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Exploration law

fn exploration_law(r: &mut Report) {
    let (eps, n_actions, n) = (0.2, 4usize, 100_000u64);
    let greedy = 2usize;
    let mut cfg = ExplorationConfig::epsilon_greedy("acceptance", eps);
    cfg.default_policy = Some(DefaultPolicy::Action(action(greedy)));
    let explorer = match Explorer::new(cfg) {
        Ok(e) => e,
        Err(e) => return r.fail(format!("config rejected: {e}")),
    };
    let ctx = Context::new(
        FeatureSet::new().with("user", "x", 1.0),
        (0..n_actions).map(|j| FeatureSet::new().with("item", &format!("i{j}"), 1.0)).collect(),
    )
    .expect("context is valid");
    let mut counts = vec![0u64; n_actions];
    let mut below_floor = 0;
    let mut off_floor = 0;
    for i in 0..n {
        let key = EventKey::new(format!("e{i}")).expect("key is valid");
        let (a, ev) = explorer
            .choose_action(key, ctx.clone(), EventTime(i))
            .expect("valid decision");
        counts[a.zero_based()] += 1;
        let p = ev.probability.get();
        if p < 0.05 {
            below_floor += 1;
        }
        if a.zero_based() != greedy && p != 0.05 {
            off_floor += 1;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        let p = if j == greedy { 1.0 - eps + eps / n_actions as f64 } else { eps / n_actions as f64 };
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let f = c as f64 / n as f64;
        let z = (f - p) / sigma;
        r.check(z.abs() <= 3.0, format!("action {}: frequency {f:.4}, expected {p:.4}, z = {z:+.2}", j + 1));
    }
    r.check(below_floor == 0, format!("logged probabilities below 0.05: {below_floor}"));
    r.check(off_floor == 0, format!("non-greedy decisions not logged at exactly 0.05: {off_floor}"));
}

// ---------------------------------------------------------------------------
// 5. Replay

/// A copy of `src` with log line `at` rewritten by `edit`.
fn mutated_copy(src: &dyn Store, at: u64, edit: impl Fn(&mut JoinedInteraction)) -> MemStore {
    let dst = MemStore::new();
    for id in src.model_ids().expect("memory store") {
        dst.put_model(id, &src.get_model(Some(id)).expect("model present")).expect("memory store");
    }
    for (id, bytes) in src.journal_segments().expect("memory store") {
        dst.put_journal_segment(id, &bytes).expect("memory store");
    }
    for (i, mut ji) in src.read_all_interactions().expect("memory store").into_iter().enumerate() {
        if i as u64 == at {
            edit(&mut ji);
        }
        dst.append_interaction(&ji).expect("memory store");
    }
    dst
}

fn replay_bitexact(r: &mut Report) {
    let env = SyntheticEnvironment::stationary();
    let cfg = LoopConfig::standard(0.2, 0.01);
    let n = 50_000;
    let store = Arc::new(MemStore::new());
    if let Err(e) = run_loop(&env, &cfg, n, store.clone()) {
        return r.fail(format!("loop failed: {e}"));
    }
    let models = store.model_ids().expect("memory store").len();
    let (lc, ec) = (cfg.effective_learner(), cfg.exploration());
    match verify_run(&lc, &ec, store.as_ref()) {
        Ok(rep) => {
            r.check(
                rep.checkpoints == models && models > 1,
                format!("{} of {models} checkpoints reproduced byte for byte", rep.checkpoints),
            );
            r.check(
                rep.decisions == n as usize,
                format!("{} of {n} logged decisions recomputed identically", rep.decisions),
            );
        }
        Err(d) => return r.fail(format!("clean run diverged: {d}")),
    }

    let log = store.read_all_interactions().expect("memory store");
    type Mutation = fn(&mut JoinedInteraction);
    let cases: [(&str, u64, Mutation); 3] = [
        ("reward flipped", 31_337, |ji| {
            ji.reward = if ji.reward.get() > 0.0 { Reward::ZERO } else { Reward::ONE }
        }),
        ("action changed", 12_345, |ji| {
            ji.action = action((ji.action.zero_based() + 1) % ji.context.action_count())
        }),
        ("probability changed", 44_444, |ji| ji.probability *= 0.5),
    ];
    for (what, at, edit) in cases {
        let bad = mutated_copy(store.as_ref(), at, edit);
        let expected_key = &log[at as usize].key;
        match verify_run(&lc, &ec, &bad) {
            Ok(_) => r.fail(format!("{what} at offset {at}: not detected")),
            Err(d) => r.check(
                d.key.as_ref() == Some(expected_key) && d.log_offset == Some(at),
                format!("{what} at offset {at} ({expected_key}): reported {:?} at {:?}", d.kind, d.key.as_ref().map(EventKey::as_str)),
            ),
        }
    }
}

// ---------------------------------------------------------------------------
// 6. Join semantics

const UNIT: u64 = 10;

#[derive(Debug, Clone, Copy)]
enum Obs {
    Decision { key: &'static str, t: u64 },
    Reward { key: &'static str, t: u64, value: f64 },
}

/// Decisions and rewards around the window edges for `UNIT` = 10.
const ALPHABET: [Obs; 9] = [
    Obs::Decision { key: "a", t: 0 },
    Obs::Decision { key: "a", t: 10 },
    Obs::Decision { key: "b", t: 3 },
    Obs::Reward { key: "a", t: 0, value: 0.125 },
    Obs::Reward { key: "a", t: 5, value: 0.25 },
    Obs::Reward { key: "a", t: 10, value: 0.375 },
    Obs::Reward { key: "a", t: 21, value: 0.5 },
    Obs::Reward { key: "b", t: 13, value: 0.625 },
    Obs::Reward { key: "b", t: 14, value: 0.75 },
];

/// (key, decision time, reward, emit time) for one emitted record.
type Emitted = (String, u64, f64, u64);

/// Straight-line model of the window rules over plain vectors.
struct NaiveJoin {
    open: Vec<(String, u64, usize, Option<f64>)>,
    pending: Vec<(String, u64, f64)>,
    watermark: u64,
    seq: usize,
}

impl NaiveJoin {
    fn new() -> Self {
        NaiveJoin {
            open: Vec::new(),
            pending: Vec::new(),
            watermark: 0,
            seq: 0,
        }
    }

    fn eligible(d: u64, t: u64) -> bool {
        d.saturating_sub(UNIT) <= t && t <= d + UNIT
    }

    fn ingest(&mut self, o: Obs) {
        self.seq += 1;
        match o {
            Obs::Decision { key, t } => {
                if self.open.iter().any(|w| w.0 == key) {
                    return;
                }
                let mut reward = None;
                let buffered: Vec<_> = self.pending.iter().filter(|p| p.0 == key).cloned().collect();
                self.pending.retain(|p| p.0 != key);
                for (_, rt, v) in buffered {
                    if reward.is_none() && Self::eligible(t, rt) {
                        reward = Some(v);
                    }
                }
                self.open.push((key.to_owned(), t, self.seq, reward));
            }
            Obs::Reward { key, t, value } => match self.open.iter_mut().find(|w| w.0 == key) {
                Some(w) => {
                    if w.3.is_none() && Self::eligible(w.1, t) {
                        w.3 = Some(value);
                    }
                }
                None => self.pending.push((key.to_owned(), t, value)),
            },
        }
    }

    fn advance(&mut self, w: u64) -> Vec<Emitted> {
        self.watermark = self.watermark.max(w);
        let wm = self.watermark;
        let mut due: Vec<_> = self.open.iter().filter(|x| x.1 + UNIT <= wm).cloned().collect();
        self.open.retain(|x| x.1 + UNIT > wm);
        due.sort_by_key(|x| (x.1 + UNIT, x.2));
        self.pending.retain(|p| p.1 + UNIT > wm);
        due.into_iter()
            .map(|(k, d, _, r)| (k, d, r.unwrap_or(0.0), d + UNIT))
            .collect()
    }
}

fn to_observation(o: Obs) -> Observation {
    match o {
        Obs::Decision { key, t } => Observation::Decision(DecisionEvent {
            key: EventKey::new(key).expect("key is valid"),
            context: Context::bare(2).expect("two actions"),
            action: action(0),
            probability: Probability::new(0.5).expect("valid probability"),
            model_id: 0,
            timestamp: EventTime(t),
        }),
        Obs::Reward { key, t, value } => Observation::Reward(RewardObservation {
            key: EventKey::new(key).expect("key is valid"),
            reward: Reward::clamped(value).0,
            timestamp: EventTime(t),
        }),
    }
}

fn emitted(out: &[JoinedInteraction]) -> Vec<Emitted> {
    out.iter()
        .map(|ji| (ji.key.to_string(), ji.decision_time.0, ji.reward.get(), ji.emit_time.0))
        .collect()
}

/// Compares the join with the naive model on one arrival order. `policy`
/// picks the watermark after each arrival: none, the largest time seen,
/// or the arrival's own time plus half a unit.
fn compare_interleaving(seq: &[Obs], policy: usize) -> Result<(), String> {
    let mut join = JoinService::new(JoinConfig::new(UNIT));
    let mut naive = NaiveJoin::new();
    let mut max_t = 0;
    for (i, &o) in seq.iter().enumerate() {
        join.ingest(to_observation(o));
        naive.ingest(o);
        let t = match o {
            Obs::Decision { t, .. } | Obs::Reward { t, .. } => t,
        };
        max_t = max_t.max(t);
        let w = match policy {
            0 => continue,
            1 => max_t,
            _ => t + UNIT / 2,
        };
        let got = emitted(&join.advance(EventTime(w)).map_err(|e| e.to_string())?);
        let want = naive.advance(w);
        if got != want {
            return Err(format!("{seq:?} policy {policy} step {i}: join {got:?}, oracle {want:?}"));
        }
    }
    let got = emitted(&join.advance(EventTime(1_000)).map_err(|e| e.to_string())?);
    let want = naive.advance(1_000);
    if got != want {
        return Err(format!("{seq:?} policy {policy} final: join {got:?}, oracle {want:?}"));
    }
    let m = join.metrics();
    if m.emitted != m.decisions || join.open_windows() != 0 {
        return Err(format!("{seq:?}: {} decisions but {} emitted", m.decisions, m.emitted));
    }
    Ok(())
}

fn join_semantics(r: &mut Report) {
    let mut scenarios = 0u64;
    let mut first_failure = None;
    let mut failures = 0u64;
    let mut seq = Vec::with_capacity(4);
    fn rec(seq: &mut Vec<Obs>, depth: usize, f: &mut dyn FnMut(&[Obs])) {
        if !seq.is_empty() {
            f(seq);
        }
        if depth == 0 {
            return;
        }
        for o in ALPHABET {
            seq.push(o);
            rec(seq, depth - 1, f);
            seq.pop();
        }
    }
    rec(&mut seq, 4, &mut |s| {
        for policy in 0..3 {
            scenarios += 1;
            if let Err(e) = compare_interleaving(s, policy) {
                failures += 1;
                first_failure.get_or_insert(e);
            }
        }
    });
    r.check(
        failures == 0,
        format!("{scenarios} interleavings of 1-4 observations x 3 watermark schedules: {failures} differ from the oracle"),
    );
    if let Some(e) = first_failure {
        r.lines.push(format!("     first difference: {e}"));
    }

    // Randomized stream: decisions every few ms, rewards with random delays
    // (some before the decision, some late), watermark trailing by 5 ms.
    let unit = 100;
    let mut join = JoinService::new(JoinConfig::new(unit));
    let mut prg = Prg::new(6);
    let n = 100_000u64;
    let mut arrivals: Vec<(u64, u64, Observation)> = Vec::with_capacity(2 * n as usize);
    let mut t = 0;
    for i in 0..n {
        t += prg.below(5);
        let key = EventKey::new(format!("r{i}")).expect("key is valid");
        arrivals.push((
            t,
            2 * i,
            Observation::Decision(DecisionEvent {
                key: key.clone(),
                context: Context::bare(2).expect("two actions"),
                action: action(0),
                probability: Probability::new(0.5).expect("valid probability"),
                model_id: 0,
                timestamp: EventTime(t),
            }),
        ));
        if prg.bernoulli(0.7) {
            let rt = (t + prg.below(160)).saturating_sub(20);
            arrivals.push((
                rt,
                2 * i + 1,
                Observation::Reward(RewardObservation {
                    key,
                    reward: Reward::ONE,
                    timestamp: EventTime(rt),
                }),
            ));
        }
    }
    arrivals.sort_by_key(|(at, seq, _)| (*at, *seq));
    let mut out = Vec::new();
    for (at, _, obs) in arrivals {
        join.ingest(obs);
        out.extend(join.advance(EventTime(at.saturating_sub(5))).expect("no store attached"));
    }
    out.extend(join.advance(EventTime(u64::MAX / 2)).expect("no store attached"));
    let bad_delay = out.iter().filter(|ji| ji.emit_time.0 - ji.decision_time.0 != unit).count();
    let in_order = out.windows(2).all(|w| w[0].decision_time <= w[1].decision_time);
    let m = join.metrics();
    r.check(bad_delay == 0, format!("{} emitted records, {bad_delay} with emit - decision != {unit}", out.len()));
    r.check(in_order, "emission in decision-time order".to_owned());
    r.check(
        m.emitted == n && out.len() as u64 == n,
        format!("{n} decisions, {} emitted ({} with reward, {} late or orphaned)", m.emitted, m.emitted_with_reward, m.orphan_rewards),
    );
}

// ---------------------------------------------------------------------------
// 7. Failure injection

/// Events in the drifting dataset used for the discrepancy experiments.
pub const FAILURE_EVENTS: u64 = 50_000;
/// Learning rate used both in the loop and by the offline learner.
pub const FAILURE_RATE: f64 = 0.0003;

/// The five corruptions in the order they are reported.
pub fn failure_corruptions() -> Vec<Corruption> {
    vec![
        Corruption::OverrideActions {
            fraction: 0.1,
            target: OverrideTarget::Incumbent,
        },
        Corruption::AddDecisionFeature,
        Corruption::ModifyFeature {
            namespace: "user".into(),
            fraction: 0.2,
            defaults: [("u0".to_owned(), 1.0)].into_iter().collect(),
        },
        Corruption::DeleteFeature {
            namespace: "user".into(),
        },
        Corruption::ShiftRewards {
            top_k: 1,
            lead: Some(3000),
        },
    ]
}

fn failure_injection(r: &mut Report) {
    let seed = 1;
    let env = SyntheticEnvironment::covariate_drift(FAILURE_EVENTS);
    let mut cfg = LoopConfig::standard(0.2, FAILURE_RATE);
    cfg.seed = seed;
    let store = Arc::new(MemStore::new());
    if let Err(e) = run_loop(&env, &cfg, FAILURE_EVENTS, store.clone()) {
        return r.fail(format!("loop failed: {e}"));
    }
    let ds = Dataset::new(store.read_all_interactions().expect("memory store")).expect("logged data is valid");
    let lc = LearnerConfig::constant(FAILURE_RATE);
    let opts = ExperimentOptions {
        seed,
        ..ExperimentOptions::default()
    };
    let clean = match discrepancy_experiment(&ds, None, &lc, opts) {
        Ok(rep) => rep,
        Err(e) => return r.fail(format!("clean experiment failed: {e}")),
    };
    r.check(
        clean.ratio <= 1.05,
        format!("clean: train {:.3} test {:.3} ratio {:.3} (limit 1.05)", clean.train_estimate, clean.test_estimate, clean.ratio),
    );
    let mut ratios = Vec::new();
    for c in failure_corruptions() {
        match discrepancy_experiment(&ds, Some(&c), &lc, opts) {
            Ok(rep) => {
                r.check(
                    rep.ratio > 1.2,
                    format!("{}: train {:.3} test {:.3} ratio {:.3} (need > 1.2)", rep.mode, rep.train_estimate, rep.test_estimate, rep.ratio),
                );
                ratios.push((rep.mode, rep.ratio));
            }
            Err(e) => r.fail(format!("{}: {e}", c.name())),
        }
    }
    let top = ratios
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|x| x.0.clone())
        .unwrap_or_default();
    r.check(top == "add_decision_feature", format!("largest ratio: {top}"));
}

// ---------------------------------------------------------------------------
// 8. Staleness

fn staleness(r: &mut Report) {
    let seg_len = 20_000u64;
    let env = SyntheticEnvironment::table_switch(seg_len);
    let mut cfg = LoopConfig::standard(0.2, 0.01);
    cfg.seed = 8;
    let store = Arc::new(MemStore::new());
    if let Err(e) = run_loop(&env, &cfg, 3 * seg_len, store.clone()) {
        return r.fail(format!("loop failed: {e}"));
    }
    let log = store.read_all_interactions().expect("memory store");
    let interval = cfg.decision_interval_ms;
    let mut segments = vec![Vec::new(), Vec::new(), Vec::new()];
    for ji in log {
        let i = (ji.decision_time.0 / interval / seg_len).min(2) as usize;
        segments[i].push(ji);
    }
    let segments: Vec<Dataset> = segments
        .into_iter()
        .map(|s| Dataset::new(s).expect("logged data is valid"))
        .collect();
    let opts = ExperimentOptions {
        seed: 8,
        ..ExperimentOptions::default()
    };
    let rows = match staleness_experiment(&segments, &LearnerConfig::constant(0.01), opts) {
        Ok(rows) => rows,
        Err(e) => return r.fail(format!("experiment failed: {e}")),
    };
    for row in &rows {
        r.lines.push(format!(
            "     segment {}: frozen {:.3} fresh {:.3} ratio {:.3}",
            row.segment, row.frozen_value, row.fresh_value, row.ratio
        ));
    }
    let ratios: Vec<f64> = rows.iter().map(|x| x.ratio).collect();
    r.check(
        ratios.windows(2).all(|w| w[1] < w[0]),
        format!("ratios strictly decreasing: {ratios:.3?}"),
    );
    r.check(ratios.last().is_some_and(|&x| x < 0.9), "segment-3 ratio below 0.9".to_owned());
}

// ---------------------------------------------------------------------------
// 9. Performance

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn performance(r: &mut Report) {
    // Decision latency with a 1000-feature context.
    let mut prg = Prg::new(9);
    let mut shared = FeatureSet::new();
    for f in 0..990 {
        shared.insert("page", &format!("f{f}"), prg.next_f64());
    }
    let actions: Vec<FeatureSet> = (0..10).map(|j| FeatureSet::new().with("item", &format!("i{j}"), 1.0)).collect();
    let ctx = Context::new(shared.clone(), actions).expect("context is valid");
    let weights = Weights::from_named(
        shared
            .iter()
            .map(|(ns, name, _)| format!("shared/{ns}:{name}"))
            .chain((0..10).map(|j| format!("action/item:i{j}")))
            .map(|k| (k, prg.next_f64() - 0.5)),
    );
    let explorer = Explorer::new(ExplorationConfig::epsilon_greedy("perf", 0.2)).expect("valid config");
    explorer.install(LinearPolicy::new(weights, FeatureMap::UNION));
    let mut lat = Vec::with_capacity(10_000);
    for i in 0..10_000u64 {
        let key = EventKey::new(format!("p{i}")).expect("key is valid");
        let c = ctx.clone();
        let t = Instant::now();
        let _ = explorer.choose_action(key, c, EventTime(i));
        lat.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let med = median(lat);
    r.check(med < 5.0, format!("choose_action median {med:.4} ms, 1000 features (hard limit 5 ms)"));
    r.soft(med < 1.0, format!("choose_action median below 1 ms: {}", med < 1.0));

    // Learner throughput on 10-action contexts.
    let n = 30_000usize;
    let data: Vec<JoinedInteraction> = (0..n)
        .map(|i| {
            let shared = (0..10).fold(FeatureSet::new(), |fs, f| fs.with("user", &format!("f{f}"), prg.next_f64()));
            let actions = (0..10)
                .map(|j| {
                    FeatureSet::new()
                        .with("item", &format!("i{j}"), 1.0)
                        .with("topic", &format!("t{}", prg.below(20)), 1.0)
                        .with("stats", "ctr", prg.next_f64())
                })
                .collect();
            JoinedInteraction {
                key: EventKey::new(format!("l{i}")).expect("key is valid"),
                context: Context::new(shared, actions).expect("context is valid"),
                action: action(prg.below(10) as usize),
                probability: 0.1,
                reward: if prg.bernoulli(0.3) { Reward::ONE } else { Reward::ZERO },
                decision_time: EventTime(i as u64),
                emit_time: EventTime(i as u64 + 1),
                model_id: 0,
            }
        })
        .collect();
    let mut learner = Learner::new(LearnerConfig::constant(0.01)).expect("valid config");
    let t = Instant::now();
    for ji in &data {
        let _ = learner.train_step(ji);
    }
    let rate = n as f64 / t.elapsed().as_secs_f64();
    r.check(rate >= 500.0, format!("learner {rate:.0} events/s on 10-action contexts (hard floor 500)"));
    r.soft(rate >= 2000.0, format!("learner at or above 2000 events/s: {}", rate >= 2000.0));

    // End-to-end learning latency in real time: poll every 100 ms, 1 s
    // experimental unit, a checkpoint after every event.
    let mut lc = LoopConfig::standard(0.2, 0.01);
    lc.experimental_unit_ms = 1_000;
    lc.refresh_interval_ms = 100;
    lc.checkpoint_interval_ms = 1;
    let svc_cfg = ServiceConfig {
        loop_cfg: lc.clone(),
        tick_ms: 5,
        lateness_ms: 10,
    };
    let svc = match LocalService::start(svc_cfg, Arc::new(MemStore::new())) {
        Ok(s) => s,
        Err(e) => return r.fail(format!("service failed to start: {e}")),
    };
    let req = crate::gateway::DecisionRequest {
        app_id: lc.app_id.clone(),
        event_id: None,
        shared: FeatureSet::new().with("user", "u0", 1.0),
        actions: (0..4)
            .map(|j| crate::gateway::ActionSpec {
                id: format!("a{j}"),
                features: FeatureSet::new().with("item", &format!("i{j}"), 1.0),
            })
            .collect(),
    };
    let mut e2e = Vec::new();
    for trained in 1..=3u64 {
        let resp = match svc.decide(&req) {
            Ok(x) => x,
            Err(e) => return r.fail(format!("decision failed: {e}")),
        };
        let sent = Instant::now();
        let _ = svc.reward(&crate::gateway::RewardRequest {
            event_id: resp.event_id,
            reward: 1.0,
        });
        let deadline = sent + Duration::from_secs(30);
        loop {
            let seen = svc
                .gateway()
                .explorer()
                .snapshot()
                .is_some_and(|m| m.trained_on_count >= trained);
            if seen {
                e2e.push(sent.elapsed().as_secs_f64());
                break;
            }
            if Instant::now() > deadline {
                r.fail("no model trained on the event within 30 s".to_owned());
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
    let _ = svc.shutdown();
    if !e2e.is_empty() {
        let mean = e2e.iter().sum::<f64>() / e2e.len() as f64;
        r.soft(mean < 10.0, format!("end-to-end learning latency {mean:.2} s over {} events (target 10 s)", e2e.len()));
    }
}

// ---------------------------------------------------------------------------
// 10. Learning efficacy

fn learning_efficacy(r: &mut Report) {
    let env = SyntheticEnvironment::stationary();
    let cfg = LoopConfig::standard(0.2, 0.01);
    let n = 20_000;
    let store = Arc::new(MemStore::new());
    let report = match run_loop(&env, &cfg, n, store.clone()) {
        Ok(rep) => rep,
        Err(e) => return r.fail(format!("loop failed: {e}")),
    };
    let (policy, _) = match store.get_model(None).map(|b| decode_model(&b)) {
        Ok(Ok(x)) => x,
        _ => return r.fail("no final model in the store".to_owned()),
    };
    let contexts = env.contexts();
    let table: Vec<usize> = contexts.iter().map(|c| greedy_action(&policy, c).zero_based()).collect();
    let eps = cfg.epsilon0;
    let uniform: f64 = {
        let total: f64 = env.archetype_weights.iter().sum();
        env.archetype_weights
            .iter()
            .zip(&env.rewards)
            .map(|(w, row)| w / total * row.iter().sum::<f64>() / row.len() as f64)
            .sum()
    };
    let learned = (1.0 - eps) * table_value(&env.archetype_weights, &env.rewards, &table) + eps * uniform;
    let optimum = (1.0 - eps) * table_value(&env.archetype_weights, &env.rewards, &STATIONARY_BEST) + eps * uniform;
    r.check(
        learned >= 0.95 * optimum,
        format!("mixture value of the final policy {learned:.4} vs optimum {optimum:.4} ({:.1}%, need 95%)", 100.0 * learned / optimum),
    );
    let p0 = uniform;
    let z = (report.mean_reward - p0) / (p0 * (1.0 - p0) / n as f64).sqrt();
    r.check(
        z > 3.09,
        format!("online mean reward {:.4} vs uniform {p0:.4} over {n} events: z = {z:.1} (need > 3.09, p < 0.001)", report.mean_reward),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_an_error() {
        assert_eq!(run("nope").unwrap_err(), AcceptanceError::UnknownSuite("nope".into()));
    }

    #[test]
    fn table_model_picks_its_table() {
        let env = SyntheticEnvironment::stationary();
        let m = table_model(&STATIONARY_BEST);
        let picks: Vec<usize> = env.contexts().iter().map(|c| greedy_action(&m, c).zero_based()).collect();
        assert_eq!(picks, STATIONARY_BEST);
        let v = table_value(&env.archetype_weights, &env.rewards, &STATIONARY_BEST);
        assert!((v - 0.78).abs() < 1e-12);
    }

    #[test]
    fn naive_join_examples() {
        let mut j = NaiveJoin::new();
        j.ingest(Obs::Reward { key: "k", t: 0, value: 1.0 });
        j.ingest(Obs::Decision { key: "k", t: 3 });
        assert!(j.advance(12).is_empty());
        assert_eq!(j.advance(13), vec![("k".to_owned(), 3, 1.0, 13)]);
    }

    #[test]
    fn ci_formula_matches_worked_example() {
        let w = ci_formula(2.0, 0.05, 10_000, 100.0, 0.05);
        assert!((w - 0.1744).abs() < 5e-5, "{w}");
    }
}
