//! Canonical joint featurization φ(x, a).
//!
//! Keys are `shared/<ns>:<name>` for shared features, `action/<ns>:<name>`
//! for the chosen action's features (the `<ns>:` part is omitted for the
//! empty namespace) and the constant `bias`. With interactions enabled every
//! shared × action pair adds `<shared key>*<action key>` valued at the
//! product. Keys are hashed with FNV-1a 64 into feature ids.

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::hash::Fnv64;
use crate::types::{ActionIndex, Context, FeatureSet};

pub const BIAS_KEY: &str = "bias";

/// Which feature families φ contains beyond the plain union.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    /// Add quadratic shared × action terms.
    #[serde(default)]
    pub interactions: bool,
}

impl FeatureMap {
    pub const UNION: FeatureMap = FeatureMap {
        interactions: false,
    };
    pub const QUADRATIC: FeatureMap = FeatureMap { interactions: true };
}

/// Sparse hashed feature vector in canonical order: bias, shared, action,
/// interactions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector {
    pub entries: Vec<(u64, f64)>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum()
    }
}

pub fn feature_id(key: &str) -> u64 {
    Fnv64::new().write_str(key).finish()
}

pub fn bias_id() -> u64 {
    feature_id(BIAS_KEY)
}

fn key_state(side: &str, ns: &str, name: &str) -> Fnv64 {
    let h = Fnv64::new().write_str(side).write(b"/");
    let h = if ns.is_empty() {
        h
    } else {
        h.write_str(ns).write(b":")
    };
    h.write_str(name)
}

fn key_string(side: &str, ns: &str, name: &str) -> String {
    if ns.is_empty() {
        format!("{side}/{name}")
    } else {
        format!("{side}/{ns}:{name}")
    }
}

/// Hash states of the shared keys; interaction ids continue from them.
pub(crate) fn shared_states(shared: &FeatureSet) -> Vec<(Fnv64, f64)> {
    shared
        .iter()
        .map(|(ns, name, v)| (key_state("shared", ns, name), v))
        .collect()
}

/// Appends the action-dependent part of φ: action features and, when
/// enabled, interactions with the given shared states.
pub(crate) fn push_action_part(
    out: &mut Vec<(u64, f64)>,
    shared: &[(Fnv64, f64)],
    action: &FeatureSet,
    map: FeatureMap,
) {
    for (ns, name, v) in action.iter() {
        out.push((key_state("action", ns, name).finish(), v));
    }
    if map.interactions {
        for &(sh, sv) in shared {
            let prefix = sh.write(b"*");
            for (ns, name, av) in action.iter() {
                let id = key_state_from(prefix, "action", ns, name).finish();
                out.push((id, sv * av));
            }
        }
    }
}

fn key_state_from(h: Fnv64, side: &str, ns: &str, name: &str) -> Fnv64 {
    let h = h.write_str(side).write(b"/");
    let h = if ns.is_empty() {
        h
    } else {
        h.write_str(ns).write(b":")
    };
    h.write_str(name)
}

/// φ(x, a) as hashed ids.
pub fn featurize(
    ctx: &Context,
    a: ActionIndex,
    map: FeatureMap,
) -> Result<FeatureVector, ValidationError> {
    let action = ctx.action_features(a)?;
    let shared = shared_states(ctx.shared());
    let mut entries = Vec::with_capacity(1 + shared.len() + action.len());
    entries.push((bias_id(), 1.0));
    entries.extend(shared.iter().map(|(h, v)| (h.finish(), *v)));
    push_action_part(&mut entries, &shared, action, map);
    Ok(FeatureVector { entries })
}

/// φ(x, a) with readable keys, in the same order as [`featurize`].
pub fn featurize_named(
    ctx: &Context,
    a: ActionIndex,
    map: FeatureMap,
) -> Result<Vec<(String, f64)>, ValidationError> {
    let action = ctx.action_features(a)?;
    let mut out = vec![(BIAS_KEY.to_owned(), 1.0)];
    let shared: Vec<(String, f64)> = ctx
        .shared()
        .iter()
        .map(|(ns, name, v)| (key_string("shared", ns, name), v))
        .collect();
    out.extend(shared.iter().cloned());
    for (ns, name, v) in action.iter() {
        out.push((key_string("action", ns, name), v));
    }
    if map.interactions {
        for (sk, sv) in &shared {
            for (ns, name, av) in action.iter() {
                out.push((format!("{sk}*{}", key_string("action", ns, name)), sv * av));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn a(i: u32) -> ActionIndex {
        ActionIndex::new(i).unwrap()
    }

    fn example_ctx() -> Context {
        Context::new(
            FeatureSet::new().with("", "f1", 2.0),
            vec![FeatureSet::new().with("", "g1", 3.0)],
        )
        .unwrap()
    }

    #[test]
    fn union_of_shared_action_and_bias() {
        let named = featurize_named(&example_ctx(), a(1), FeatureMap::UNION).unwrap();
        assert_eq!(
            named,
            vec![
                ("bias".to_owned(), 1.0),
                ("shared/f1".to_owned(), 2.0),
                ("action/g1".to_owned(), 3.0)
            ]
        );
    }

    #[test]
    fn empty_context_is_bias_only() {
        let ctx = Context::bare(1).unwrap();
        let named = featurize_named(&ctx, a(1), FeatureMap::UNION).unwrap();
        assert_eq!(named, vec![("bias".to_owned(), 1.0)]);
        let fv = featurize(&ctx, a(1), FeatureMap::UNION).unwrap();
        assert_eq!(fv.entries, vec![(bias_id(), 1.0)]);
    }

    #[test]
    fn out_of_range_action() {
        let ctx = Context::bare(3).unwrap();
        assert!(matches!(
            featurize(&ctx, a(4), FeatureMap::UNION),
            Err(ValidationError::ActionOutOfRange { action: 4, count: 3 })
        ));
    }

    #[test]
    fn hashed_ids_follow_named_keys() {
        let ctx = Context::new(
            FeatureSet::new().with("user", "u1", 1.0).with("", "age", 0.3),
            vec![
                FeatureSet::new().with("item", "i1", 1.0),
                FeatureSet::new().with("item", "i2", 2.0),
            ],
        )
        .unwrap();
        for map in [FeatureMap::UNION, FeatureMap::QUADRATIC] {
            for act in ctx.actions() {
                let named = featurize_named(&ctx, act, map).unwrap();
                let hashed = featurize(&ctx, act, map).unwrap();
                let expect: Vec<(u64, f64)> =
                    named.iter().map(|(k, v)| (feature_id(k), *v)).collect();
                assert_eq!(hashed.entries, expect);
            }
        }
    }

    #[test]
    fn interactions_are_products() {
        let ctx = Context::new(
            FeatureSet::new().with("u", "x", 2.0),
            vec![FeatureSet::new().with("i", "y", 3.0)],
        )
        .unwrap();
        let named = featurize_named(&ctx, a(1), FeatureMap::QUADRATIC).unwrap();
        assert!(named.contains(&("shared/u:x*action/i:y".to_owned(), 6.0)));
        assert_eq!(named.len(), 4);
    }

    #[test]
    fn shared_and_action_keys_never_alias() {
        // Same namespace and name on both sides.
        let ctx = Context::new(
            FeatureSet::new().with("n", "k", 1.0),
            vec![FeatureSet::new().with("n", "k", 1.0)],
        )
        .unwrap();
        let named = featurize_named(&ctx, a(1), FeatureMap::QUADRATIC).unwrap();
        let keys: HashSet<_> = named.iter().map(|(k, _)| k.clone()).collect();
        assert_eq!(keys.len(), named.len());
        let ids: HashSet<_> = featurize(&ctx, a(1), FeatureMap::QUADRATIC)
            .unwrap()
            .entries
            .iter()
            .map(|(id, _)| *id)
            .collect();
        assert_eq!(ids.len(), named.len());
    }
}
