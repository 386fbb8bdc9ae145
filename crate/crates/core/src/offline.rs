//! Batch evaluation over exploration logs: IPS with confidence widths, the
//! order-preserving train/test split, data corruptors and the train/test
//! discrepancy and staleness experiments.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::join::JoinedInteraction;
use crate::learner::{ci_width, CiParams, LearnError, Learner, LearnerConfig, PolicyValueEstimate};
use crate::policy::{LinearPolicy, Policy};
use crate::prg::Prg;
use crate::types::{ActionIndex, Namespace};

#[derive(Debug, Error)]
pub enum OfflineError {
    #[error("dataset is empty")]
    Empty,
    #[error("record {index} ({key}): probability {p} outside (0, 1]")]
    BadProbability { index: usize, key: String, p: f64 },
    #[error("record {index} ({key}): {reason}")]
    BadRecord { index: usize, key: String, reason: String },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An exploration dataset in stream order.
///
/// Every record has a probability in (0, 1] and a logged action inside its
/// context. Records coming from the join are in release order, which is
/// decision-time order; `shift_rewards` deliberately breaks that.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<JoinedInteraction>,
}

impl Dataset {
    pub fn new(records: Vec<JoinedInteraction>) -> Result<Self, OfflineError> {
        for (index, r) in records.iter().enumerate() {
            if !(r.probability > 0.0 && r.probability <= 1.0) {
                return Err(OfflineError::BadProbability {
                    index,
                    key: r.key.to_string(),
                    p: r.probability,
                });
            }
            if let Err(e) = r.context.check(r.action) {
                return Err(OfflineError::BadRecord {
                    index,
                    key: r.key.to_string(),
                    reason: e.to_string(),
                });
            }
            let rv = r.reward.get();
            if !(0.0..=1.0).contains(&rv) {
                return Err(OfflineError::BadRecord {
                    index,
                    key: r.key.to_string(),
                    reason: format!("reward {rv} outside [0, 1]"),
                });
            }
        }
        Ok(Dataset { records })
    }

    pub fn records(&self) -> &[JoinedInteraction] {
        &self.records
    }

    pub fn into_records(self) -> Vec<JoinedInteraction> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn min_probability(&self) -> Option<f64> {
        self.records.iter().map(|r| r.probability).reduce(f64::min)
    }

    pub fn from_reader(r: impl BufRead) -> Result<Self, OfflineError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ji = JoinedInteraction::from_line(&line).map_err(|source| OfflineError::Parse {
                line: i + 1,
                source,
            })?;
            records.push(ji);
        }
        Dataset::new(records)
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}", r.to_line())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OfflineError> {
        Dataset::from_reader(io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("records serialize as UTF-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IpsResult {
    pub estimate: f64,
    pub ci_width: f64,
    pub n: usize,
    pub min_probability: f64,
}

/// `1/N Σ 1{π(x)=a} r/p` with the confidence width taken at the smallest
/// logged probability.
pub fn ips_evaluate(ds: &Dataset, policy: &dyn Policy, params: CiParams) -> Result<IpsResult, OfflineError> {
    let mut est = PolicyValueEstimate::new("");
    for r in &ds.records {
        est.observe(policy.choose(&r.context) == r.action, r.reward.get(), r.probability);
    }
    let estimate = est.estimate().ok_or(OfflineError::Empty)?;
    Ok(IpsResult {
        estimate,
        ci_width: ci_width(params, est.min_prob_seen, est.count),
        n: ds.len(),
        min_probability: est.min_prob_seen,
    })
}

/// Assigns each record to train independently with probability
/// `train_fraction`; both halves keep the original order.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), OfflineError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(OfflineError::Param(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut prg = Prg::from_parts(&[b"split", &seed.to_le_bytes()]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in &ds.records {
        if prg.bernoulli(train_fraction) {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((Dataset { records: train }, Dataset { records: test }))
}

/// Which action an overridden record is switched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideTarget {
    /// Always this action (clipped to the context's range).
    Fixed(ActionIndex),
    /// The action logged most often for the same shared features, the way
    /// a downstream business rule would favour an incumbent choice.
    Incumbent,
}

/// A data-collection fault applied to the training side of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Corruption {
    /// Replace the logged action on a random fraction of records and keep
    /// the old probability.
    OverrideActions { fraction: f64, target: OverrideTarget },
    /// Add namespace `decision` with `chosen` = 1 on the logged action and 0
    /// on the others.
    AddDecisionFeature,
    /// Replace a namespace's contents with `defaults` on a random fraction of
    /// records.
    ModifyFeature {
        namespace: String,
        fraction: f64,
        #[serde(default)]
        defaults: Namespace,
    },
    DeleteFeature { namespace: String },
    /// Move the rewarded records of the `top_k` most rewarded actions `lead`
    /// positions earlier in the stream, or to the front when `lead` is
    /// absent.
    ShiftRewards {
        top_k: usize,
        #[serde(default)]
        lead: Option<usize>,
    },
}

pub const DECISION_NAMESPACE: &str = "decision";
pub const DECISION_FEATURE: &str = "chosen";

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Corruption::OverrideActions { .. } => "override_actions",
            Corruption::AddDecisionFeature => "add_decision_feature",
            Corruption::ModifyFeature { .. } => "modify_feature",
            Corruption::DeleteFeature { .. } => "delete_feature",
            Corruption::ShiftRewards { .. } => "shift_rewards",
        }
    }

    fn check(&self) -> Result<(), OfflineError> {
        let frac = match self {
            Corruption::OverrideActions { fraction, .. } | Corruption::ModifyFeature { fraction, .. } => *fraction,
            _ => return Ok(()),
        };
        if (0.0..=1.0).contains(&frac) {
            Ok(())
        } else {
            Err(OfflineError::Param(format!("fraction {frac} outside [0, 1]")))
        }
    }
}

fn shared_key(r: &JoinedInteraction) -> String {
    serde_json::to_string(r.context.shared()).expect("features serialize")
}

fn incumbents(records: &[JoinedInteraction]) -> HashMap<String, ActionIndex> {
    let mut counts: HashMap<String, BTreeMap<ActionIndex, u64>> = HashMap::new();
    for r in records {
        *counts.entry(shared_key(r)).or_default().entry(r.action).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(k, c)| {
            // Highest count, lowest index on ties.
            let best = c
                .iter()
                .fold(None::<(ActionIndex, u64)>, |acc, (&a, &n)| match acc {
                    Some((_, m)) if m >= n => acc,
                    _ => Some((a, n)),
                })
                .expect("at least one action counted")
                .0;
            (k, best)
        })
        .collect()
}

/// Applies `c` and returns the corrupted copy. Random choices draw from a
/// PRG seeded with `seed`.
pub fn corrupt(ds: &Dataset, c: &Corruption, seed: u64) -> Result<Dataset, OfflineError> {
    c.check()?;
    let mut prg = Prg::from_parts(&[b"corrupt", c.name().as_bytes(), &seed.to_le_bytes()]);
    let mut records = ds.records.clone();
    match c {
        Corruption::OverrideActions { fraction, target } => {
            let inc = matches!(target, OverrideTarget::Incumbent).then(|| incumbents(&records));
            for r in &mut records {
                if !prg.bernoulli(*fraction) {
                    continue;
                }
                let a = match target {
                    OverrideTarget::Fixed(a) if r.context.check(*a).is_ok() => *a,
                    OverrideTarget::Fixed(_) => ActionIndex::from_zero_based(0),
                    OverrideTarget::Incumbent => inc.as_ref().expect("computed above")[&shared_key(r)],
                };
                r.action = a;
            }
        }
        Corruption::AddDecisionFeature => {
            for r in &mut records {
                let chosen = r.action.zero_based();
                let (_, actions) = r.context.parts_mut();
                for (i, af) in actions.iter_mut().enumerate() {
                    af.insert(DECISION_NAMESPACE, DECISION_FEATURE, if i == chosen { 1.0 } else { 0.0 });
                }
            }
        }
        Corruption::ModifyFeature {
            namespace,
            fraction,
            defaults,
        } => {
            let mut seen = false;
            for r in &mut records {
                let hit = prg.bernoulli(*fraction);
                let (shared, actions) = r.context.parts_mut();
                for fs in std::iter::once(shared).chain(actions.iter_mut()) {
                    if let Some(ns) = fs.0.get_mut(namespace) {
                        seen = true;
                        if hit {
                            *ns = defaults.clone();
                        }
                    }
                }
            }
            if !seen {
                log::warn!("modify_feature: namespace {namespace:?} not present; data unchanged");
            }
        }
        Corruption::DeleteFeature { namespace } => {
            let mut seen = false;
            for r in &mut records {
                let (shared, actions) = r.context.parts_mut();
                for fs in std::iter::once(shared).chain(actions.iter_mut()) {
                    seen |= fs.remove_namespace(namespace).is_some();
                }
            }
            if !seen {
                log::warn!("delete_feature: namespace {namespace:?} not present; data unchanged");
            }
        }
        Corruption::ShiftRewards { top_k, lead } => {
            let mut rewarded: BTreeMap<ActionIndex, u64> = BTreeMap::new();
            for r in &records {
                if r.reward.get() > 0.0 {
                    *rewarded.entry(r.action).or_default() += 1;
                }
            }
            let mut ranked: Vec<_> = rewarded.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let top: Vec<ActionIndex> = ranked.iter().take(*top_k).map(|(a, _)| *a).collect();
            let mut keyed: Vec<(i64, u8, JoinedInteraction)> = records
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    if r.reward.get() > 0.0 && top.contains(&r.action) {
                        let pos = match lead {
                            Some(l) => i as i64 - *l as i64,
                            None => -1,
                        };
                        (pos, 0, r)
                    } else {
                        (i as i64, 1, r)
                    }
                })
                .collect();
            keyed.sort_by_key(|(pos, rank, _)| (*pos, *rank));
            records = keyed.into_iter().map(|(_, _, r)| r).collect();
        }
    }
    Ok(Dataset { records })
}

/// Result of one training pass over a dataset.
#[derive(Debug, Clone)]
pub struct Trained {
    pub policy: LinearPolicy,
    pub progressive: PolicyValueEstimate,
    pub rejected: u64,
}

/// Trains a fresh learner over `ds` in order (batch replay). Invalid
/// records are skipped.
pub fn train(cfg: &LearnerConfig, ds: &Dataset) -> Result<Trained, OfflineError> {
    let mut learner = Learner::new(cfg.clone())?;
    let mut rejected = 0;
    for r in &ds.records {
        match learner.train_step(r) {
            Ok(_) => {}
            Err(LearnError::InvalidData { .. }) => rejected += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Trained {
        policy: learner.policy().clone(),
        progressive: learner.progressive().clone(),
        rejected,
    })
}

/// How the train side of a discrepancy experiment is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainEstimate {
    /// Progressive estimate collected while training.
    #[default]
    Progressive,
    /// IPS of the final policy on the (corrupted) training data.
    FinalOnTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyReport {
    pub mode: String,
    pub train_estimate: f64,
    pub test_estimate: f64,
    /// train / test
    pub ratio: f64,
    pub clean_train_estimate: f64,
    pub clean_test_estimate: f64,
    pub clean_baseline_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub seed: u64,
    pub train_fraction: f64,
    pub train_estimate: TrainEstimate,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            seed: 0,
            train_fraction: 0.8,
            train_estimate: TrainEstimate::Progressive,
        }
    }
}

fn run_side(cfg: &LearnerConfig, train_ds: &Dataset, test_ds: &Dataset, how: TrainEstimate) -> Result<(f64, f64), OfflineError> {
    let t = train(cfg, train_ds)?;
    let train_est = match how {
        TrainEstimate::Progressive => t.progressive.estimate().ok_or(OfflineError::Empty)?,
        TrainEstimate::FinalOnTrain => ips_evaluate(train_ds, &t.policy, CiParams::default())?.estimate,
    };
    let test_est = ips_evaluate(test_ds, &t.policy, CiParams::default())?.estimate;
    Ok((train_est, test_est))
}

fn ratio(train: f64, test: f64) -> f64 {
    if test > 0.0 {
        train / test
    } else {
        f64::INFINITY
    }
}

/// Splits `ds`, corrupts the training side, trains on clean and corrupted
/// training data and compares each train-side estimate with the final
/// policy's IPS on the untouched test side.
pub fn discrepancy_experiment(
    ds: &Dataset,
    corruption: Option<&Corruption>,
    cfg: &LearnerConfig,
    opts: ExperimentOptions,
) -> Result<DiscrepancyReport, OfflineError> {
    let (train_ds, test_ds) = split(ds, opts.train_fraction, opts.seed)?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(OfflineError::Empty);
    }
    let (clean_train, clean_test) = run_side(cfg, &train_ds, &test_ds, opts.train_estimate)?;
    let (faulty_train, faulty_test) = match corruption {
        Some(c) => {
            let bad = corrupt(&train_ds, c, opts.seed)?;
            run_side(cfg, &bad, &test_ds, opts.train_estimate)?
        }
        None => (clean_train, clean_test),
    };
    Ok(DiscrepancyReport {
        mode: corruption.map_or("clean", Corruption::name).to_owned(),
        train_estimate: faulty_train,
        test_estimate: faulty_test,
        ratio: ratio(faulty_train, faulty_test),
        clean_train_estimate: clean_train,
        clean_test_estimate: clean_test,
        clean_baseline_ratio: ratio(clean_train, clean_test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StalenessRow {
    /// 1-based segment number.
    pub segment: usize,
    pub frozen_value: f64,
    pub fresh_value: f64,
    /// frozen / fresh
    pub ratio: f64,
}

/// Trains on the first segment, freezes that policy and compares it on
/// every segment with a policy trained fresh on that segment. Each segment
/// is split; policies train on the train part and are scored by IPS on the
/// test part.
pub fn staleness_experiment(
    segments: &[Dataset],
    cfg: &LearnerConfig,
    opts: ExperimentOptions,
) -> Result<Vec<StalenessRow>, OfflineError> {
    let mut rows = Vec::with_capacity(segments.len());
    let mut frozen: Option<LinearPolicy> = None;
    for (i, seg) in segments.iter().enumerate() {
        let (tr, te) = split(seg, opts.train_fraction, opts.seed.wrapping_add(i as u64))?;
        if tr.is_empty() || te.is_empty() {
            return Err(OfflineError::Empty);
        }
        let fresh = train(cfg, &tr)?.policy;
        let frozen = frozen.get_or_insert_with(|| fresh.clone());
        let fresh_value = ips_evaluate(&te, &fresh, CiParams::default())?.estimate;
        let frozen_value = ips_evaluate(&te, &*frozen, CiParams::default())?.estimate;
        rows.push(StalenessRow {
            segment: i + 1,
            frozen_value,
            fresh_value,
            ratio: ratio(frozen_value, fresh_value),
        });
    }
    Ok(rows)
}
