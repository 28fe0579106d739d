//! Single-trajectory estimators of the occupancy measure and of the policy
//! gradient, with and without importance weighting.
//!
//! All estimators consume a trajectory sampled under a behavior parameter
//! `theta_1` and estimate quantities of a target parameter `theta_2` through
//! the step-wise importance weights
//!
//! ```text
//! omega_t = prod_{h <= t} pi_theta2(a_h | s_h) / pi_theta1(a_h | s_h),
//! ```
//!
//! the ratio of the two trajectory densities up to step `t` (the transition
//! kernel cancels). Weights are accumulated in log space, so long horizons
//! cannot overflow prematurely. No self-normalization is applied anywhere:
//! the variance-reduction recursions in [`crate::optim`] rely on these being
//! exactly unbiased, which normalized weights would break.
//!
//! With `theta_1 == theta_2` every weight is exactly 1 and the estimators
//! reduce to their on-policy forms.
//!
//! * [`occupancy_estimate`]: `sum_t gamma^t omega_t e_{s_t, a_t}`, an
//!   unbiased estimate of the horizon-truncated occupancy of `theta_2`.
//! * [`pg_estimate`]: the score-function policy-gradient estimate
//!   `sum_t gamma^t omega_t r(s_t, a_t) sum_{h <= t} grad log pi_theta2(a_h | s_h)`
//!   for a fixed quasi-reward `r`, an unbiased estimate of
//!   `[grad lambda_H(theta_2)]^T r`. The inner sum is maintained as a running
//!   score vector, one `O(d)` update per step instead of the naive `O(H d)`.

use crate::mdp::{OccupancyKind, OccupancyVector, Trajectory};
use crate::policy::{self, FeatureMap, GradWorkspace};

/// Cumulative importance weights of a trajectory, kept in log space alongside
/// the exponentiated values.
#[derive(Debug, Clone)]
pub struct WeightSequence {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightSequence {
    /// The all-ones sequence: the on-policy case.
    pub fn ones(horizon: usize) -> Self {
        Self { log_weights: vec![0.0; horizon], weights: vec![1.0; horizon] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `omega_t`.
    pub fn weight(&self, t: usize) -> f64 {
        self.weights[t]
    }

    pub fn log_weight(&self, t: usize) -> f64 {
        self.log_weights[t]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }
}

/// Cumulative importance weights `omega_t` of `traj` (sampled under
/// `theta_behavior`) toward `theta_target`.
pub fn importance_weights<F: FeatureMap>(
    fm: &F,
    traj: &Trajectory,
    theta_behavior: &[f64],
    theta_target: &[f64],
) -> WeightSequence {
    let h = traj.horizon();
    let mut log_weights = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    let mut cum = 0.0;
    for &(s, a) in &traj.steps {
        cum += policy::log_action_prob(fm, theta_target, s, a)
            - policy::log_action_prob(fm, theta_behavior, s, a);
        log_weights.push(cum);
        weights.push(cum.exp());
    }
    WeightSequence { log_weights, weights }
}

/// Occupancy estimate with explicit weights:
/// `lambda_hat(s, a) = sum_t gamma^t omega_t 1{(s_t, a_t) = (s, a)}`.
pub fn occupancy_estimate_with<F: FeatureMap>(
    fm: &F,
    traj: &Trajectory,
    weights: &WeightSequence,
    gamma: f64,
) -> OccupancyVector {
    assert_eq!(weights.len(), traj.horizon(), "weight/trajectory length mismatch");
    let na = fm.num_actions();
    let mut entries = vec![0.0; fm.num_states() * na];
    let mut disc = 1.0;
    for (t, &(s, a)) in traj.steps.iter().enumerate() {
        entries[s * na + a] += disc * weights.weight(t);
        disc *= gamma;
    }
    OccupancyVector { entries, kind: OccupancyKind::Sampled }
}

/// Importance-weighted occupancy estimate of `theta_target` from a trajectory
/// sampled under `theta_behavior`.
pub fn occupancy_estimate<F: FeatureMap>(
    fm: &F,
    traj: &Trajectory,
    theta_behavior: &[f64],
    theta_target: &[f64],
    gamma: f64,
) -> OccupancyVector {
    let weights = importance_weights(fm, traj, theta_behavior, theta_target);
    occupancy_estimate_with(fm, traj, &weights, gamma)
}

/// Policy-gradient estimate with explicit weights. Scores are taken at
/// `theta_scores` (the parameter whose gradient is being estimated), and `r`
/// is the fixed quasi-reward in state-action layout.
pub fn pg_estimate_with<F: FeatureMap>(
    fm: &F,
    traj: &Trajectory,
    theta_scores: &[f64],
    weights: &WeightSequence,
    r: &[f64],
    gamma: f64,
) -> Vec<f64> {
    assert_eq!(weights.len(), traj.horizon(), "weight/trajectory length mismatch");
    assert_eq!(r.len(), fm.num_states() * fm.num_actions(), "quasi-reward length mismatch");
    let d = fm.dim();
    let na = fm.num_actions();
    let mut ws = GradWorkspace::new(fm);
    let mut step_grad = vec![0.0; d];
    let mut score_sum = vec![0.0; d];
    let mut out = vec![0.0; d];
    let mut disc = 1.0;
    for (t, &(s, a)) in traj.steps.iter().enumerate() {
        policy::log_policy_grad_into(fm, theta_scores, s, a, &mut ws, &mut step_grad);
        for (acc, g) in score_sum.iter_mut().zip(&step_grad) {
            *acc += g;
        }
        let coeff = disc * weights.weight(t) * r[s * na + a];
        if coeff != 0.0 {
            for (o, sc) in out.iter_mut().zip(&score_sum) {
                *o += coeff * sc;
            }
        }
        disc *= gamma;
    }
    out
}

/// Importance-weighted policy-gradient estimate of
/// `[grad lambda_H(theta_target)]^T r` from a trajectory sampled under
/// `theta_behavior`.
pub fn pg_estimate<F: FeatureMap>(
    fm: &F,
    traj: &Trajectory,
    theta_behavior: &[f64],
    theta_target: &[f64],
    r: &[f64],
    gamma: f64,
) -> Vec<f64> {
    let weights = importance_weights(fm, traj, theta_behavior, theta_target);
    pg_estimate_with(fm, traj, theta_target, &weights, r, gamma)
}
