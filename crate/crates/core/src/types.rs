//! Domain values shared by every stage of the loop.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// Features of one namespace: name → value.
pub type Namespace = BTreeMap<String, f64>;

/// A set of namespaced features. Keys are sorted, so the serialized form is
/// canonical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSet(pub BTreeMap<String, Namespace>);

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, namespace: &str, name: &str, value: f64) -> Self {
        self.insert(namespace, name, value);
        self
    }

    pub fn insert(&mut self, namespace: &str, name: &str, value: f64) {
        self.0
            .entry(namespace.to_owned())
            .or_default()
            .insert(name.to_owned(), value);
    }

    pub fn namespace(&self, namespace: &str) -> Option<&Namespace> {
        self.0.get(namespace)
    }

    pub fn remove_namespace(&mut self, namespace: &str) -> Option<Namespace> {
        self.0.remove(namespace)
    }

    pub fn is_empty(&self) -> bool {
        self.0.values().all(|ns| ns.is_empty())
    }

    pub fn len(&self) -> usize {
        self.0.values().map(|ns| ns.len()).sum()
    }

    /// `(namespace, name, value)` in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.0.iter().flat_map(|(ns, feats)| {
            feats
                .iter()
                .map(move |(name, &v)| (ns.as_str(), name.as_str(), v))
        })
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        for (ns, feats) in &self.0 {
            if ns.contains(':') || ns.contains('/') {
                return Err(ValidationError::InvalidNamespace(ns.clone()));
            }
            for (name, v) in feats {
                if name.is_empty() {
                    return Err(ValidationError::EmptyFeatureName(ns.clone()));
                }
                if ns.is_empty() && name.contains(':') {
                    return Err(ValidationError::AmbiguousFeatureName(name.clone()));
                }
                if !v.is_finite() {
                    return Err(ValidationError::NonFiniteFeature(format!("{ns}:{name}")));
                }
            }
        }
        Ok(())
    }
}

/// The observed context `x`: shared features plus one feature set per
/// feasible action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawContext")]
pub struct Context {
    shared: FeatureSet,
    actions: Vec<FeatureSet>,
}

#[derive(Deserialize)]
struct RawContext {
    #[serde(default)]
    shared: FeatureSet,
    actions: Vec<FeatureSet>,
}

impl TryFrom<RawContext> for Context {
    type Error = ValidationError;

    fn try_from(raw: RawContext) -> Result<Self, Self::Error> {
        Context::new(raw.shared, raw.actions)
    }
}

impl Context {
    pub fn new(shared: FeatureSet, actions: Vec<FeatureSet>) -> Result<Self, ValidationError> {
        if actions.is_empty() {
            return Err(ValidationError::NoActions);
        }
        shared.validate()?;
        for a in &actions {
            a.validate()?;
        }
        Ok(Context { shared, actions })
    }

    /// `n` actions without features.
    pub fn bare(n: usize) -> Result<Self, ValidationError> {
        Context::new(FeatureSet::new(), vec![FeatureSet::new(); n])
    }

    pub fn shared(&self) -> &FeatureSet {
        &self.shared
    }

    pub fn action_features(&self, a: ActionIndex) -> Result<&FeatureSet, ValidationError> {
        self.check(a)?;
        Ok(&self.actions[a.zero_based()])
    }

    pub fn all_action_features(&self) -> &[FeatureSet] {
        &self.actions
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionIndex> {
        (1..=self.actions.len() as u32).map(ActionIndex)
    }

    pub fn check(&self, a: ActionIndex) -> Result<(), ValidationError> {
        if a.0 == 0 || a.0 as usize > self.actions.len() {
            return Err(ValidationError::ActionOutOfRange {
                action: a.0,
                count: self.actions.len(),
            });
        }
        Ok(())
    }

    /// Mutable access for corruptors; the caller re-validates.
    pub(crate) fn parts_mut(&mut self) -> (&mut FeatureSet, &mut Vec<FeatureSet>) {
        (&mut self.shared, &mut self.actions)
    }
}

/// 1-based action index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct ActionIndex(u32);

impl ActionIndex {
    pub fn new(index: u32) -> Result<Self, ValidationError> {
        if index == 0 {
            return Err(ValidationError::ActionOutOfRange { action: 0, count: 0 });
        }
        Ok(ActionIndex(index))
    }

    pub fn from_zero_based(i: usize) -> Self {
        ActionIndex(i as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn zero_based(self) -> usize {
        self.0 as usize - 1
    }
}

impl TryFrom<u32> for ActionIndex {
    type Error = ValidationError;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        ActionIndex::new(v)
    }
}

impl From<ActionIndex> for u32 {
    fn from(a: ActionIndex) -> u32 {
        a.0
    }
}

impl fmt::Display for ActionIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Probability the exploration policy assigned to the chosen action; in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn new(p: f64) -> Result<Self, ValidationError> {
        if p > 0.0 && p <= 1.0 {
            Ok(Probability(p))
        } else {
            Err(ValidationError::Probability(p))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = ValidationError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Probability::new(v)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// Reward in [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Reward(f64);

impl Reward {
    pub const ZERO: Reward = Reward(0.0);
    pub const ONE: Reward = Reward(1.0);

    /// Clamps into [0, 1]; non-finite input becomes 0. The flag reports
    /// whether the value was altered.
    pub fn clamped(v: f64) -> (Reward, bool) {
        if v.is_nan() {
            return (Reward(0.0), true);
        }
        let c = v.clamp(0.0, 1.0);
        (Reward(c), c != v)
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Key shared by the decision and reward reports of one interaction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EventKey(String);

impl EventKey {
    pub fn new(key: impl Into<String>) -> Result<Self, ValidationError> {
        let key = key.into();
        if key.is_empty() {
            return Err(ValidationError::EmptyKey);
        }
        Ok(EventKey(key))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EventKey {
    type Error = ValidationError;
    fn try_from(v: String) -> Result<Self, Self::Error> {
        EventKey::new(v)
    }
}

impl From<EventKey> for String {
    fn from(k: EventKey) -> String {
        k.0
    }
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Event time in milliseconds. Simulated or wall-clock, the pipeline never
/// reads a clock itself.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EventTime(pub u64);

impl EventTime {
    pub fn plus_ms(self, ms: u64) -> EventTime {
        EventTime(self.0.saturating_add(ms))
    }
}

/// Model id 0 marks decisions made without a trained model.
pub const DEFAULT_MODEL_ID: u64 = 0;
