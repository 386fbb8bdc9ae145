//! Linear policies, scoring and the versioned model file.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ValidationError;
use crate::features::{self, bias_id, FeatureMap, FeatureVector};
use crate::types::{ActionIndex, Context};

/// Sparse weight vector keyed by feature id. Missing ids weigh 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights(HashMap<u64, f64>);

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_named<S: AsRef<str>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        Weights(
            pairs
                .into_iter()
                .map(|(k, v)| (features::feature_id(k.as_ref()), v))
                .collect(),
        )
    }

    pub fn get(&self, id: u64) -> f64 {
        self.0.get(&id).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, id: u64, v: f64) {
        self.0.insert(id, v);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Dot product summed in feature order, which keeps it reproducible.
    #[inline]
    pub fn dot(&self, fv: &FeatureVector) -> f64 {
        self.dot_entries(&fv.entries)
    }

    #[inline]
    pub(crate) fn dot_entries(&self, entries: &[(u64, f64)]) -> f64 {
        let mut s = 0.0;
        for &(id, v) in entries {
            if let Some(w) = self.0.get(&id) {
                s += w * v;
            }
        }
        s
    }

    /// `w += scale * fv`, applied in feature order.
    #[inline]
    pub fn add_scaled(&mut self, fv: &FeatureVector, scale: f64) {
        for &(id, v) in &fv.entries {
            *self.0.entry(id).or_insert(0.0) += scale * v;
        }
    }

    /// `(id, weight)` sorted by id.
    pub fn sorted(&self) -> Vec<(u64, f64)> {
        let mut v: Vec<_> = self.0.iter().map(|(k, w)| (*k, *w)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

    pub fn plus(&self, other: &Weights) -> Weights {
        let mut out = self.clone();
        for (k, w) in &other.0 {
            *out.0.entry(*k).or_insert(0.0) += w;
        }
        out
    }
}

/// A versioned linear scorer; its greedy action defines the policy. `bag`
/// holds bootstrap members when the model was trained for Bag exploration.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub model_id: u64,
    pub trained_on_count: u64,
    pub features: FeatureMap,
    pub weights: Weights,
    pub bag: Vec<Weights>,
}

impl LinearPolicy {
    pub fn new(weights: Weights, features: FeatureMap) -> Self {
        LinearPolicy {
            model_id: 0,
            trained_on_count: 0,
            features,
            weights,
            bag: Vec::new(),
        }
    }

    pub fn zero(features: FeatureMap) -> Self {
        Self::new(Weights::new(), features)
    }
}

pub fn score(policy: &LinearPolicy, ctx: &Context, a: ActionIndex) -> Result<f64, ValidationError> {
    Ok(policy.weights.dot(&features::featurize(ctx, a, policy.features)?))
}

/// Scores of every action. The shared part of the dot product is computed
/// once; the result equals `score` for each action.
pub fn score_all(weights: &Weights, map: FeatureMap, ctx: &Context) -> Vec<f64> {
    let shared = features::shared_states(ctx.shared());
    let mut common = Vec::with_capacity(shared.len() + 1);
    common.push((bias_id(), 1.0));
    common.extend(shared.iter().map(|(h, v)| (h.finish(), *v)));
    let base = weights.dot_entries(&common);
    let mut buf = Vec::new();
    ctx.all_action_features()
        .iter()
        .map(|af| {
            buf.clear();
            features::push_action_part(&mut buf, &shared, af, map);
            // Same summation order as the full featurized dot product.
            let mut s = base;
            for &(id, v) in &buf {
                s += weights.get(id) * v;
            }
            s
        })
        .collect()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> ActionIndex {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    ActionIndex::from_zero_based(best)
}

pub fn greedy_action(policy: &LinearPolicy, ctx: &Context) -> ActionIndex {
    argmax_lowest(&score_all(&policy.weights, policy.features, ctx))
}

/// Anything mapping a context to an action.
pub trait Policy: Send + Sync {
    fn choose(&self, ctx: &Context) -> ActionIndex;
}

impl Policy for LinearPolicy {
    fn choose(&self, ctx: &Context) -> ActionIndex {
        greedy_action(self, ctx)
    }
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn choose(&self, ctx: &Context) -> ActionIndex {
        (**self).choose(ctx)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn choose(&self, ctx: &Context) -> ActionIndex {
        (**self).choose(ctx)
    }
}

/// Always the same action, clipped to the context's range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedAction(pub ActionIndex);

impl Policy for FixedAction {
    fn choose(&self, ctx: &Context) -> ActionIndex {
        if ctx.check(self.0).is_ok() {
            self.0
        } else {
            ActionIndex::from_zero_based(0)
        }
    }
}

/// Adapts a closure.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&Context) -> ActionIndex + Send + Sync,
{
    fn choose(&self, ctx: &Context) -> ActionIndex {
        (self.0)(ctx)
    }
}

// ---------------------------------------------------------------------------
// Model file
//
// Two newline-terminated JSON lines. The first is the header:
//   {"format":"banditloop-model","version":1,"model_id":..,"trained_on_count":..,
//    "interactions":..,"bag_size":..,"cursor":{..}|null}
// The second is the body: {"weights":[["<16 hex id>",w],..],"bag":[[..],..]}
// with pairs sorted by id. Floats use shortest round-trip formatting, so
// decoding reproduces the weights bit for bit.

pub const MODEL_FORMAT: &str = "banditloop-model";
pub const MODEL_VERSION: u32 = 1;

/// Learner position stored with a checkpoint so training can resume from it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingCursor {
    pub steps_since_reset: u64,
    pub reset_epoch: u64,
    /// Exploration-log records consumed, including rejected ones.
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub model_id: u64,
    pub trained_on_count: u64,
    pub interactions: bool,
    pub bag_size: usize,
    pub cursor: Option<TrainingCursor>,
}

#[derive(Serialize, Deserialize)]
struct ModelBody {
    weights: Vec<(String, f64)>,
    bag: Vec<Vec<(String, f64)>>,
}

#[derive(Debug, Error)]
pub enum ModelFormatError {
    #[error("model file is missing its {0} line")]
    MissingLine(&'static str),
    #[error("unsupported model format {format:?} version {version}")]
    Unsupported { format: String, version: u32 },
    #[error("bad feature id {0:?}")]
    BadId(String),
    #[error("bag size {header} in header but {body} members in body")]
    BagMismatch { header: usize, body: usize },
    #[error("weight is not finite")]
    NonFinite,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn encode_weights(w: &Weights) -> Result<Vec<(String, f64)>, ModelFormatError> {
    w.sorted()
        .into_iter()
        .map(|(id, v)| {
            if v.is_finite() {
                Ok((format!("{id:016x}"), v))
            } else {
                Err(ModelFormatError::NonFinite)
            }
        })
        .collect()
}

fn decode_weights(pairs: Vec<(String, f64)>) -> Result<Weights, ModelFormatError> {
    let mut w = Weights::new();
    for (k, v) in pairs {
        let id = u64::from_str_radix(&k, 16).map_err(|_| ModelFormatError::BadId(k.clone()))?;
        if k.len() != 16 {
            return Err(ModelFormatError::BadId(k));
        }
        w.set(id, v);
    }
    Ok(w)
}

pub fn encode_model(
    policy: &LinearPolicy,
    cursor: Option<TrainingCursor>,
) -> Result<Vec<u8>, ModelFormatError> {
    let header = ModelHeader {
        format: MODEL_FORMAT.to_owned(),
        version: MODEL_VERSION,
        model_id: policy.model_id,
        trained_on_count: policy.trained_on_count,
        interactions: policy.features.interactions,
        bag_size: policy.bag.len(),
        cursor,
    };
    let body = ModelBody {
        weights: encode_weights(&policy.weights)?,
        bag: policy
            .bag
            .iter()
            .map(encode_weights)
            .collect::<Result<_, _>>()?,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    serde_json::to_writer(&mut out, &body)?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(LinearPolicy, ModelHeader), ModelFormatError> {
    let mut lines = bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty());
    let header: ModelHeader =
        serde_json::from_slice(lines.next().ok_or(ModelFormatError::MissingLine("header"))?)?;
    if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
        return Err(ModelFormatError::Unsupported {
            format: header.format,
            version: header.version,
        });
    }
    let body: ModelBody =
        serde_json::from_slice(lines.next().ok_or(ModelFormatError::MissingLine("body"))?)?;
    if body.bag.len() != header.bag_size {
        return Err(ModelFormatError::BagMismatch {
            header: header.bag_size,
            body: body.bag.len(),
        });
    }
    let policy = LinearPolicy {
        model_id: header.model_id,
        trained_on_count: header.trained_on_count,
        features: FeatureMap {
            interactions: header.interactions,
        },
        weights: decode_weights(body.weights)?,
        bag: body
            .bag
            .into_iter()
            .map(decode_weights)
            .collect::<Result<_, _>>()?,
    };
    Ok((policy, header))
}
