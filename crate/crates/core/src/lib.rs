//! Contextual-bandit decision loop: explore, log, learn, deploy.
//!
//! - [`exploration`]: ε-greedy / bagging action choice with logged
//!   probabilities and per-event seeded randomness.
//! - [`join`]: rewards joined to decisions under a uniform delay.
//! - [`learner`]: importance-weighted online regression, checkpoints,
//!   a replay journal and real-time policy evaluation.
//! - [`store`]: models, journal segments and the exploration log.
//! - [`offline`]: IPS evaluation, splits, data corruptors and the
//!   train/test discrepancy experiments.
//! - [`gateway`]: JSON request types for decision and reward calls.
//! - [`sim`]: synthetic environments and the simulated-time loop;
//!   [`service`] is the same loop on the wall clock.
//! - [`replay`]: offline reproduction of an online run.
//! - [`acceptance`]: the runnable acceptance checks.

pub mod acceptance;
pub mod error;
pub mod exploration;
pub mod features;
pub mod gateway;
pub mod hash;
pub mod join;
pub mod learner;
pub mod offline;
pub mod policy;
pub mod prg;
pub mod replay;
pub mod service;
pub mod sim;
pub mod store;
pub mod types;

pub use error::ValidationError;
pub use exploration::{ExplorationConfig, Explorer};
pub use join::{JoinConfig, JoinService, JoinedInteraction};
pub use learner::{Learner, LearnerConfig};
pub use offline::Dataset;
pub use policy::{LinearPolicy, Policy};
pub use store::{DirStore, MemStore, Store};
pub use types::{ActionIndex, Context, EventKey, EventTime, FeatureSet, Reward};
