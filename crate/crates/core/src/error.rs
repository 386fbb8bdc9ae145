use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("context has no actions")]
    NoActions,
    #[error("action {action} out of range 1..={count}")]
    ActionOutOfRange { action: u32, count: usize },
    #[error("probability {0} outside (0, 1]")]
    Probability(f64),
    #[error("feature value for {0:?} is not finite")]
    NonFiniteFeature(String),
    #[error("empty feature name in namespace {0:?}")]
    EmptyFeatureName(String),
    #[error("invalid namespace {0:?}: ':' and '/' are reserved")]
    InvalidNamespace(String),
    #[error("feature name {0:?} in the default namespace must not contain ':'")]
    AmbiguousFeatureName(String),
    #[error("event key must be non-empty")]
    EmptyKey,
    #[error("epsilon0 {0} outside [0, 1]")]
    Epsilon(f64),
    #[error("bag size must be at least 1")]
    BagSize,
    #[error("{0}")]
    Other(String),
}
