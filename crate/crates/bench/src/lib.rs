//! Fixtures shared by the benchmarks.

use banditloop_core::exploration::{DecisionEvent, Observation, RewardObservation};
use banditloop_core::types::Probability;
use banditloop_core::{ActionIndex, Context, EventKey, EventTime, FeatureSet, JoinedInteraction, Reward};

/// Ten shared features and `actions` actions with three features each.
pub fn context(i: u64, actions: usize) -> Context {
    let shared = (0..10).fold(FeatureSet::new(), |fs, f| {
        fs.with("user", &format!("f{f}"), ((i * 31 + f) % 17) as f64 / 17.0)
    });
    let acts = (0..actions)
        .map(|j| {
            FeatureSet::new()
                .with("item", &format!("i{j}"), 1.0)
                .with("topic", &format!("t{}", (i as usize + j) % 20), 1.0)
                .with("stats", "ctr", ((i as usize * 7 + j) % 11) as f64 / 11.0)
        })
        .collect();
    Context::new(shared, acts).expect("at least one action")
}

pub fn interactions(n: u64, actions: usize) -> Vec<JoinedInteraction> {
    (0..n)
        .map(|i| JoinedInteraction {
            key: EventKey::new(format!("e{i}")).expect("valid key"),
            context: context(i, actions),
            action: ActionIndex::from_zero_based((i as usize * 7) % actions),
            probability: 1.0 / actions as f64,
            reward: if i % 3 == 0 { Reward::ONE } else { Reward::ZERO },
            decision_time: EventTime(i),
            emit_time: EventTime(i),
            model_id: 0,
        })
        .collect()
}

/// Decisions every ms with each reward `delay` ms later, interleaved in
/// timestamp order. Rewards due at or after `n` are left out.
pub fn observations(n: u64, delay: u64) -> Vec<Observation> {
    let ctx = context(0, 4);
    let mut out = Vec::with_capacity(2 * n as usize);
    let mut pending = std::collections::VecDeque::new();
    for i in 0..n {
        while pending.front().is_some_and(|&(t, _)| t <= i) {
            let (t, k) = pending.pop_front().expect("checked");
            out.push(Observation::Reward(RewardObservation {
                key: EventKey::new(format!("e{k}")).expect("valid key"),
                reward: Reward::ONE,
                timestamp: EventTime(t),
            }));
        }
        out.push(Observation::Decision(DecisionEvent {
            key: EventKey::new(format!("e{i}")).expect("valid key"),
            context: ctx.clone(),
            action: ActionIndex::from_zero_based(0),
            probability: Probability::new(0.25).expect("in range"),
            model_id: 0,
            timestamp: EventTime(i),
        }));
        pending.push_back((i + delay, i));
    }
    out
}
