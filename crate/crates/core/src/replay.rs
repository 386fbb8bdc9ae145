//! Offline reproduction of an online run from its journal and exploration
//! log.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::exploration::{choose_action, ExplorationConfig};
use crate::join::JoinedInteraction;
use crate::learner::{decode_journal, interaction_digest, JournalRecord, Learner, LearnerConfig};
use crate::policy::{decode_model, LinearPolicy};
use crate::store::Store;
use crate::types::EventKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// The journal names an event the log does not have at that position.
    MissingEvent,
    /// The log has the event but its content changed.
    DigestMismatch,
    /// The log has more or fewer valid records than the journal says.
    RejectMismatch,
    /// Replayed weights differ from the stored checkpoint.
    WeightMismatch,
    MissingModel,
    /// A logged decision does not match the recomputed one.
    DecisionMismatch,
    /// The journal itself is malformed or out of sequence.
    BadJournal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub kind: DivergenceKind,
    pub key: Option<EventKey>,
    /// Position in the exploration log.
    pub log_offset: Option<u64>,
    pub model_id: Option<u64>,
    pub detail: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(k) = &self.key {
            write!(f, " at key {k}")?;
        }
        if let Some(o) = self.log_offset {
            write!(f, " (log offset {o})")?;
        }
        if let Some(m) = self.model_id {
            write!(f, " (model {m})")?;
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

impl std::error::Error for Divergence {}

impl Divergence {
    fn new(kind: DivergenceKind, detail: impl Into<String>) -> Self {
        Divergence {
            kind,
            key: None,
            log_offset: None,
            model_id: None,
            detail: detail.into(),
        }
    }

    fn at(mut self, key: &EventKey, offset: u64) -> Self {
        self.key = Some(key.clone());
        self.log_offset = Some(offset);
        self
    }

    fn model(mut self, id: u64) -> Self {
        self.model_id = Some(id);
        self
    }
}

/// One reproduced checkpoint: the policy and its encoded model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayedCheckpoint {
    pub policy: LinearPolicy,
    pub bytes: Vec<u8>,
}

fn bad_journal(e: impl fmt::Display) -> Divergence {
    Divergence::new(DivergenceKind::BadJournal, e.to_string())
}

/// Re-runs training as recorded in `journal` over `log` and returns every
/// checkpoint in order. Journal and log are walked in lockstep: the n-th
/// step or reject record must name the n-th log record.
pub fn replay(
    cfg: &LearnerConfig,
    journal: &[JournalRecord],
    log: &[JoinedInteraction],
) -> Result<Vec<ReplayedCheckpoint>, Divergence> {
    let mut learner = Learner::for_replay(cfg.clone()).map_err(bad_journal)?;
    let mut out = Vec::new();
    let mut pos = 0usize;
    for rec in journal {
        match rec {
            JournalRecord::Step { key, digest, step, .. } => {
                let ji = lookup(log, pos, key)?;
                if &interaction_digest(ji) != digest {
                    return Err(Divergence::new(DivergenceKind::DigestMismatch, "log record changed")
                        .at(key, pos as u64));
                }
                match learner.train_step(ji) {
                    Ok(o) if o.step == *step => {}
                    Ok(o) => {
                        return Err(bad_journal(format!("step {} replayed as {}", step, o.step))
                            .at(key, pos as u64))
                    }
                    Err(e) => {
                        return Err(Divergence::new(DivergenceKind::RejectMismatch, e.to_string())
                            .at(key, pos as u64))
                    }
                }
                pos += 1;
            }
            JournalRecord::Reject { key, .. } => {
                let ji = lookup(log, pos, key)?;
                if learner.train_step(ji).is_ok() {
                    return Err(Divergence::new(
                        DivergenceKind::RejectMismatch,
                        "record was rejected online but is valid now",
                    )
                    .at(key, pos as u64));
                }
                pos += 1;
            }
            JournalRecord::Reset { epoch, .. } => learner.apply_reset(*epoch),
            JournalRecord::Checkpoint { model_id, step } => {
                if *step != learner.step() {
                    return Err(bad_journal(format!(
                        "checkpoint at step {step} but replay is at step {}",
                        learner.step()
                    ))
                    .model(*model_id));
                }
                let cp = learner.snapshot().map_err(bad_journal)?;
                if cp.model_id != *model_id {
                    return Err(bad_journal(format!("expected model {model_id}, replay produced {}", cp.model_id))
                        .model(*model_id));
                }
                out.push(ReplayedCheckpoint {
                    policy: learner.policy().clone(),
                    bytes: cp.model,
                });
            }
        }
    }
    Ok(out)
}

fn lookup<'a>(log: &'a [JoinedInteraction], pos: usize, key: &EventKey) -> Result<&'a JoinedInteraction, Divergence> {
    match log.get(pos) {
        Some(ji) if &ji.key == key => Ok(ji),
        Some(ji) => Err(Divergence::new(
            DivergenceKind::MissingEvent,
            format!("log has {} at this position", ji.key),
        )
        .at(key, pos as u64)),
        None => Err(Divergence::new(DivergenceKind::MissingEvent, "log ended").at(key, pos as u64)),
    }
}

/// Concatenated journal segments of a store, in checkpoint order.
pub fn load_journal(store: &dyn Store) -> Result<Vec<JournalRecord>, Divergence> {
    let mut out = Vec::new();
    for (_, bytes) in store.journal_segments().map_err(bad_journal)? {
        out.extend(decode_journal(&bytes).map_err(bad_journal)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub checkpoints: usize,
    pub steps: u64,
    pub decisions: usize,
}

/// Replays a store's journal against its exploration log and checks every
/// reproduced checkpoint against the stored model bytes.
pub fn verify_training(cfg: &LearnerConfig, store: &dyn Store) -> Result<ReplayReport, Divergence> {
    let journal = load_journal(store)?;
    let log = store.read_all_interactions().map_err(bad_journal)?;
    let cps = replay(cfg, &journal, &log)?;
    for cp in &cps {
        let id = cp.policy.model_id;
        let stored = store
            .get_model(Some(id))
            .map_err(|e| Divergence::new(DivergenceKind::MissingModel, e.to_string()).model(id))?;
        if stored != cp.bytes {
            return Err(Divergence::new(DivergenceKind::WeightMismatch, "replayed model differs").model(id));
        }
    }
    Ok(ReplayReport {
        checkpoints: cps.len(),
        steps: cps.last().map_or(0, |c| c.policy.trained_on_count),
        decisions: 0,
    })
}

/// Recomputes every logged decision from its model id and the seeded PRG.
/// Returns the number checked.
pub fn verify_decisions(
    cfg: &ExplorationConfig,
    store: &dyn Store,
    log: &[JoinedInteraction],
) -> Result<usize, Divergence> {
    let mut models: HashMap<u64, Arc<LinearPolicy>> = HashMap::new();
    for (i, ji) in log.iter().enumerate() {
        let model = if ji.model_id == 0 {
            None
        } else if let Some(m) = models.get(&ji.model_id) {
            Some(Arc::clone(m))
        } else {
            let bytes = store.get_model(Some(ji.model_id)).map_err(|e| {
                Divergence::new(DivergenceKind::MissingModel, e.to_string())
                    .at(&ji.key, i as u64)
                    .model(ji.model_id)
            })?;
            let (m, _) = decode_model(&bytes).map_err(bad_journal)?;
            let m = Arc::new(m);
            models.insert(ji.model_id, Arc::clone(&m));
            Some(m)
        };
        let (action, ev) = choose_action(cfg, model.as_deref(), ji.context.clone(), ji.key.clone(), ji.decision_time)
            .map_err(|e| Divergence::new(DivergenceKind::DecisionMismatch, e.to_string()).at(&ji.key, i as u64))?;
        if action != ji.action || ev.probability.get().to_bits() != ji.probability.to_bits() {
            return Err(Divergence::new(
                DivergenceKind::DecisionMismatch,
                format!(
                    "logged ({}, {}) but recomputed ({}, {})",
                    ji.action,
                    ji.probability,
                    action,
                    ev.probability.get()
                ),
            )
            .at(&ji.key, i as u64)
            .model(ji.model_id));
        }
    }
    Ok(log.len())
}

/// Both checks; used by the CLI.
pub fn verify_run(
    learner_cfg: &LearnerConfig,
    explore_cfg: &ExplorationConfig,
    store: &dyn Store,
) -> Result<ReplayReport, Divergence> {
    let mut report = verify_training(learner_cfg, store)?;
    let log = store.read_all_interactions().map_err(bad_journal)?;
    report.decisions = verify_decisions(explore_cfg, store, &log)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{RateSchedule, ResetInterval};
    use crate::store::MemStore;
    use crate::types::{ActionIndex, Context, EventTime, FeatureSet, Reward};

    fn data(n: usize) -> Vec<JoinedInteraction> {
        (0..n)
            .map(|i| {
                let ctx = Context::new(
                    FeatureSet::new().with("user", &format!("u{}", i % 3), 1.0),
                    (0..3).map(|j| FeatureSet::new().with("item", &format!("i{j}"), 1.0)).collect(),
                )
                .unwrap();
                JoinedInteraction {
                    key: EventKey::new(format!("k{i}")).unwrap(),
                    context: ctx,
                    action: ActionIndex::from_zero_based(i % 3),
                    probability: if i == 7 { 0.0 } else { 1.0 / 3.0 },
                    reward: Reward::clamped(((i * 7) % 5) as f64 / 4.0).0,
                    decision_time: EventTime(i as u64 * 10),
                    emit_time: EventTime(i as u64 * 10 + 5),
                    model_id: 0,
                }
            })
            .collect()
    }

    fn cfg() -> LearnerConfig {
        let mut c = LearnerConfig::constant(0.1);
        c.rate_schedule = RateSchedule::InverseSqrt;
        c.reset_interval = Some(ResetInterval::Duration { ms: 170 });
        c.checkpoint_interval = Some(9);
        c.bag_size = 2;
        c
    }

    fn run(log: &[JoinedInteraction]) -> Arc<MemStore> {
        let store = Arc::new(MemStore::new());
        let mut l = Learner::new(cfg()).unwrap().with_store(store.clone());
        for ji in log {
            store.append_interaction(ji).unwrap();
            let _ = l.train_step(ji);
        }
        l.checkpoint().unwrap();
        store
    }

    #[test]
    fn clean_run_replays_exactly() {
        let log = data(100);
        let store = run(&log);
        let report = verify_training(&cfg(), store.as_ref()).unwrap();
        assert_eq!(report.checkpoints, 12);
        assert_eq!(report.steps, 99);
    }

    #[test]
    fn empty_run() {
        assert!(replay(&cfg(), &[], &[]).unwrap().is_empty());
    }

    #[test]
    fn deleted_event_is_named() {
        let log = data(50);
        let store = run(&log);
        let journal = load_journal(store.as_ref()).unwrap();
        let mut cut = log.clone();
        cut.remove(20);
        let d = replay(&cfg(), &journal, &cut).unwrap_err();
        assert_eq!(d.kind, DivergenceKind::MissingEvent);
        assert_eq!(d.key.unwrap().as_str(), "k20");
    }

    #[test]
    fn mutated_event_is_named() {
        let log = data(50);
        let store = run(&log);
        let journal = load_journal(store.as_ref()).unwrap();
        let mut bad = log.clone();
        bad[31].reward = Reward::ONE;
        bad[31].probability = 0.5;
        let d = replay(&cfg(), &journal, &bad).unwrap_err();
        assert_eq!(d.kind, DivergenceKind::DigestMismatch);
        assert_eq!(d.key.unwrap().as_str(), "k31");
    }

    #[test]
    fn tampered_model_is_detected() {
        let log = data(30);
        let store = run(&log);
        let journal = load_journal(store.as_ref()).unwrap();
        let mut other = cfg();
        other.learning_rate0 = 0.2;
        // Same journal, different learner: replayed weights drift.
        let cps = replay(&other, &journal, &log).unwrap();
        assert_ne!(cps[1].bytes, store.get_model(Some(2)).unwrap());
        let d = verify_training(&other, store.as_ref()).unwrap_err();
        assert_eq!(d.kind, DivergenceKind::WeightMismatch);
        assert_eq!(d.model_id, Some(1));
    }

    #[test]
    fn decisions_recompute() {
        let store = MemStore::new();
        let cfg = ExplorationConfig::epsilon_greedy("A", 0.3);
        let mut log = Vec::new();
        for i in 0..50u64 {
            let key = EventKey::new(format!("d{i}")).unwrap();
            let (_, ev) = choose_action(&cfg, None, Context::bare(4).unwrap(), key.clone(), EventTime(i)).unwrap();
            log.push(JoinedInteraction {
                key,
                context: ev.context,
                action: ev.action,
                probability: ev.probability.get(),
                reward: Reward::ZERO,
                decision_time: EventTime(i),
                emit_time: EventTime(i + 1),
                model_id: 0,
            });
        }
        assert_eq!(verify_decisions(&cfg, &store, &log).unwrap(), 50);
        let flipped = ActionIndex::from_zero_based((log[9].action.zero_based() + 1) % 4);
        log[9].action = flipped;
        let d = verify_decisions(&cfg, &store, &log).unwrap_err();
        assert_eq!(d.kind, DivergenceKind::DecisionMismatch);
        assert_eq!(d.key.unwrap().as_str(), "d9");
    }
}
