//! Device-cloud collaborative post-training on synthetic tasks.
//!
//! A small categorical "device" policy answers prompts on its own or calls a
//! fixed cloud oracle for help. The crate provides the group-adaptive policy
//! gradient trainer with adaptive prompt filtering, the hierarchical
//! collaboration-aware reward, GRPO / router / naive-offloading baselines and
//! exact-enumeration oracles used to verify the estimators.

pub mod baselines;
pub mod domain;
pub mod error;
pub mod gapg;
pub mod harness;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod tasks;

pub use domain::{
    ActionKind, ActionSpec, GroupSample, IterationRecord, Prompt, ResponseAction, RewardParams, RunMetrics,
    TrainerConfig,
};
pub use error::{Error, Result};
pub use policy::{ActionMask, PolicyKind, PolicyParams};
