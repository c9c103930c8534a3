//! Comparison methods: GRPO (task-only and collaboration-aware), the
//! two-stage router, naive random offloading, and the shared routed
//! evaluation used to score all of them.

mod eval;
mod grpo;
mod router;

pub use eval::{route_and_eval, EvalMode, EvalReport};
pub use grpo::{grpo_step, grpo_train_observed, normalized_advantage, GrpoConfig, GrpoMode};
pub use router::{fit_logistic, router_labels, train_router, LogisticConfig, RouterFit, RouterParams};
