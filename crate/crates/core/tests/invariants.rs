use std::sync::Arc;

use banditloop_core::exploration::{choose_action, explore_distribution, DefaultPolicy, DecisionEvent, Observation, RewardObservation};
use banditloop_core::replay::verify_run;
use banditloop_core::sim::{run_loop, LoopConfig, SyntheticEnvironment};
use banditloop_core::types::Probability;
use banditloop_core::{
    ActionIndex, Context, DirStore, EventKey, EventTime, ExplorationConfig, FeatureSet, JoinConfig, JoinService, MemStore,
    Reward,
};
use proptest::prelude::*;

fn ctx(n: usize) -> Context {
    Context::new(
        FeatureSet::new().with("user", "u", 1.0),
        (0..n).map(|j| FeatureSet::new().with("item", &format!("i{j}"), 1.0)).collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn epsilon_greedy_law(n in 1usize..12, greedy in 0usize..12, eps in 0.0f64..=1.0) {
        let greedy = greedy % n;
        let mut cfg = ExplorationConfig::epsilon_greedy("app", eps);
        cfg.default_policy = Some(DefaultPolicy::Action(ActionIndex::from_zero_based(greedy)));
        let dist = explore_distribution(&cfg, None, &ctx(n));
        let sum: f64 = dist.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (a, &p) in dist.probs().iter().enumerate() {
            let want = if a == greedy { 1.0 - eps + eps / n as f64 } else { eps / n as f64 };
            prop_assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decisions_are_a_function_of_the_key(n in 1usize..8, eps in 0.01f64..=1.0, key in "[a-z0-9]{1,12}") {
        let cfg = ExplorationConfig::epsilon_greedy("app", eps);
        let k = EventKey::new(key).unwrap();
        let (a1, e1) = choose_action(&cfg, None, ctx(n), k.clone(), EventTime(0)).unwrap();
        let (a2, _) = choose_action(&cfg, None, ctx(n), k, EventTime(99)).unwrap();
        prop_assert_eq!(a1, a2);
        prop_assert!((e1.probability.get() - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn every_decision_is_emitted_once(
        times in proptest::collection::vec(0u64..500, 1..40),
        offsets in proptest::collection::vec(-150i64..150, 0..40),
        unit in 1u64..100,
    ) {
        let mut join = JoinService::new(JoinConfig::new(unit));
        let mut obs = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            obs.push((t, Observation::Decision(DecisionEvent {
                key: EventKey::new(format!("k{i}")).unwrap(),
                context: ctx(2),
                action: ActionIndex::from_zero_based(0),
                probability: Probability::new(0.5).unwrap(),
                model_id: 0,
                timestamp: EventTime(t),
            })));
        }
        for (i, &o) in offsets.iter().enumerate() {
            let t = (times[i % times.len()] as i64 + o).max(0) as u64;
            obs.push((t, Observation::Reward(RewardObservation {
                key: EventKey::new(format!("k{}", i % times.len())).unwrap(),
                reward: Reward::ONE,
                timestamp: EventTime(t),
            })));
        }
        obs.sort_by_key(|(t, _)| *t);
        let mut out = Vec::new();
        for (t, o) in obs {
            join.ingest(o);
            out.extend(join.advance(EventTime(t)).unwrap());
        }
        out.extend(join.advance(EventTime(10_000)).unwrap());
        prop_assert_eq!(out.len(), times.len());
        let mut keys: Vec<_> = out.iter().map(|j| j.key.to_string()).collect();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), times.len());
        for j in &out {
            prop_assert_eq!(j.emit_time.0, j.decision_time.0 + unit);
        }
        prop_assert!(out.windows(2).all(|w| w[0].emit_time <= w[1].emit_time));
    }
}

#[test]
fn loop_is_identical_on_both_store_backends() {
    let env = SyntheticEnvironment::stationary();
    let cfg = LoopConfig::standard(0.2, 0.01);
    let dir = tempfile::tempdir().unwrap();
    let on_disk = Arc::new(DirStore::open(dir.path()).unwrap());
    let a = run_loop(&env, &cfg, 4_000, on_disk.clone()).unwrap();
    let b = run_loop(&env, &cfg, 4_000, Arc::new(MemStore::new())).unwrap();
    assert_eq!(a, b);

    let reopened = DirStore::open(dir.path()).unwrap();
    let rep = verify_run(&cfg.effective_learner(), &cfg.exploration(), &reopened).unwrap();
    assert_eq!(rep.decisions, 4_000);
    assert_eq!(rep.checkpoints as u64, a.checkpoints);
}
