//! Contextual counterfactual credit assignment (C3) for cooperative decision
//! protocols, on fully enumerable synthetic environments.
//!
//! Episodes are realized from an event-type DAG ([`protocol::Protocol`]) as a
//! canonically serialized occurrence sequence. Every decision occurrence sees a
//! deterministic transcript-derived context string, keyed by a 63-bit hash
//! ([`protocol::ContextKey`]). Training converts a single terminal score into
//! per-decision advantages by:
//!
//! 1. freezing a behavior snapshot of the live policy ([`policy::Snapshot`]),
//! 2. recording replay states during unscored reference rollouts,
//! 3. sampling deduplicated alternative actions at each frozen context,
//! 4. replaying each alternative with a fixed continuation distribution
//!    ([`replay::Engine::replay`]), optionally under common random numbers,
//! 5. applying a count-weighted leave-one-out baseline within each context
//!    bucket ([`credit::c3_credit`]),
//! 6. taking a clipped-surrogate policy step with KL anchoring
//!    ([`optimizer::ppo_update`]).
//!
//! Budget-matched baselines (tabular-critic MAPPO, group-centered MAGRPO) and
//! the two ablations (no fixed-context replay, no LOO baseline) share the same
//! environment, policy class, evaluator, and terminal-scoring budget; they
//! differ only in the policy-gradient weighting signal. The [`diagnostics`]
//! module provides the mechanistic estimators: target advantages by replay and
//! by exact enumeration, Spearman credit fidelity, within-context variance,
//! influence as smoothed conditional mutual information, and the unbiased
//! pass@k estimator. The [`harness`] module wires everything into a
//! reproducible experiment CLI.
//!
//! Everything is deterministic given a run configuration and seed: all
//! randomness flows through counter-based streams keyed by structured labels
//! ([`rng::StreamLabel`]), so results are byte-identical at any worker count.

pub mod credit;
pub mod diagnostics;
pub mod env;
pub mod harness;
pub mod optimizer;
pub mod policy;
pub mod protocol;
pub mod replay;
pub mod rng;

pub use credit::CreditTuple;
pub use env::{EnvSpec, TaskInstance};
pub use harness::{Method, RunConfig};
pub use policy::{PolicyTable, Snapshot};
pub use protocol::{ContextKey, EventType, Protocol};
pub use replay::{Bucket, Engine, ReplayState};
