//! Policy optimization for finite MDPs whose objective is a general utility
//! of the discounted state-action occupancy measure.
//!
//! Classical policy gradient maximizes the expected cumulative reward, which
//! is linear in the occupancy measure. This crate targets the wider class of
//! objectives `F(lambda(theta))` where `lambda(theta)` is the (unnormalized)
//! discounted occupancy measure of a softmax policy and `F` is a smooth,
//! typically concave, utility — expected reward, entropy of the state
//! distribution, log-barrier exploration bonuses, or distance to a target set
//! of feature expectations.
//!
//! The centerpiece is [`optim`], a truncated stochastic incremental
//! variance-reduced policy gradient method (TSIVR-PG). It runs in epochs: a
//! large anchor batch produces fresh estimates of the occupancy measure and
//! the policy gradient, and cheap inner iterations update both recursively
//! with importance-weighted correction terms. Every parameter update is
//! truncated to a radius `delta`, which keeps the step-to-step importance
//! weights uniformly bounded.
//!
//! Supporting modules:
//!
//! * [`mdp`] — tabular MDP models, trajectory sampling, exact occupancy
//!   measures, value iteration and policy evaluation.
//! * [`policy`] — softmax policies over pluggable feature maps, log-policy
//!   gradients, parameter checkpoints.
//! * [`estimator`] — single-trajectory estimators of the occupancy measure
//!   and of the policy gradient, with and without importance weighting.
//! * [`utility`] — the utility interface plus linear, entropy, log-barrier
//!   and set-distance instances.
//! * [`oracle`] — brute-force trajectory enumeration, finite differences and
//!   forward-mode derivatives of the state-distribution flow; the reference
//!   answers the estimators and the optimizer are tested against.
//! * [`baseline`] — a plain REINFORCE-style baseline adapted to general
//!   utilities.
//! * [`envs`] — the FrozenLake 8x8 benchmark and a family of tiny MDPs small
//!   enough for exhaustive enumeration.
//! * [`harness`] — config-file driven experiment runner: return curves with
//!   cross-run quantiles, sample-complexity slope studies, deterministic CSV
//!   output.

pub mod baseline;
pub mod envs;
pub mod estimator;
pub mod harness;
pub mod mdp;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod utility;

pub use estimator::WeightSequence;
pub use mdp::{MdpModel, OccupancyKind, OccupancyMode, OccupancyVector, PolicyMatrix, Trajectory};
pub use optim::{AlgoConfig, ConstantSet, EpochState, RunTrace, Schedule};
pub use policy::{FeatureMap, LinearFeatures, PolicyParams, TabularFeatures};
pub use utility::Utility;
