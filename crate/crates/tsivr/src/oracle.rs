//! Brute-force reference computations for testing the stochastic machinery.
//!
//! Everything here trades efficiency for being *obviously correct by
//! construction*, so the estimators and the optimizer can be verified against
//! independent code paths:
//!
//! * [`enumerate_trajectories`] lists every positive-probability trajectory
//!   of a fixed horizon with its exact probability, enabling exact
//!   expectations of arbitrary per-trajectory functionals.
//! * [`fd_gradient`] is a generic central finite-difference gradient.
//! * [`flow_jacobian_apply`] computes `[grad_theta lambda_H(theta)]^T r`
//!   exactly by forward-mode differentiation of the state-distribution flow —
//!   an algebraic route that shares no code with the score-function
//!   estimators.
//! * [`exact_policy_gradient`] evaluates `grad_theta F(lambda_H(theta))` two
//!   ways (trajectory enumeration and finite differences) and insists they
//!   agree before returning.

use crate::mdp::{exact_occupancy, MdpModel, OccupancyMode, PolicyMatrix, Trajectory};
use crate::policy::{self, FeatureMap, GradWorkspace};
use crate::utility::Utility;
use thiserror::Error;

/// Default cap on the number of enumerated trajectories.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// Finite-difference step used by [`exact_policy_gradient`].
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance at which the two routes of [`exact_policy_gradient`]
/// must agree.
const CROSS_CHECK_RTOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration exceeded the cap of {cap} trajectories at horizon {horizon}")]
    CapExceeded { cap: usize, horizon: usize },
    #[error(
        "policy-gradient routes disagree: enumeration vs finite differences rel err {rel_err}"
    )]
    RouteMismatch { rel_err: f64 },
}

/// Every positive-probability trajectory of a fixed horizon, with its exact
/// probability under a `(model, policy)` pair.
#[derive(Debug, Clone)]
pub struct EnumerationTable {
    entries: Vec<(Trajectory, f64)>,
    horizon: usize,
}

impl EnumerationTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Trajectory, f64)> {
        self.entries.iter()
    }

    /// Sum of all stored probabilities; exactly 1 up to rounding.
    pub fn total_probability(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    /// Exact expectation of a scalar functional of the trajectory.
    pub fn expectation(&self, f: impl Fn(&Trajectory) -> f64) -> f64 {
        self.entries.iter().map(|(traj, p)| p * f(traj)).sum()
    }

    /// Exact expectation of a vector functional of the trajectory.
    pub fn expectation_vec(&self, dim: usize, f: impl Fn(&Trajectory) -> Vec<f64>) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (traj, p) in &self.entries {
            let v = f(traj);
            debug_assert_eq!(v.len(), dim);
            for (o, x) in out.iter_mut().zip(&v) {
                *o += p * x;
            }
        }
        out
    }
}

/// Depth-first enumeration of all trajectories of length `horizon` with
/// positive probability under `policy`, up to `cap` entries.
pub fn enumerate_trajectories(
    model: &MdpModel,
    policy: &PolicyMatrix,
    horizon: usize,
    cap: usize,
) -> Result<EnumerationTable, OracleError> {
    let mut entries = Vec::new();
    let mut steps: Vec<(usize, usize)> = Vec::with_capacity(horizon);

    fn recurse(
        model: &MdpModel,
        policy: &PolicyMatrix,
        horizon: usize,
        cap: usize,
        state: usize,
        prob: f64,
        steps: &mut Vec<(usize, usize)>,
        entries: &mut Vec<(Trajectory, f64)>,
    ) -> Result<(), OracleError> {
        if steps.len() == horizon {
            if entries.len() == cap {
                return Err(OracleError::CapExceeded { cap, horizon });
            }
            entries.push((Trajectory { steps: steps.clone(), seed_tag: 0 }, prob));
            return Ok(());
        }
        for a in 0..model.num_actions() {
            let pa = policy.prob(state, a);
            if pa == 0.0 {
                continue;
            }
            steps.push((state, a));
            // The final step needs no successor branch: estimators never
            // look at the state after the last recorded pair.
            if steps.len() == horizon {
                recurse(model, policy, horizon, cap, state, prob * pa, steps, entries)?;
            } else {
                let row = model.transition_row(state, a);
                for (s2, &p2) in row.iter().enumerate() {
                    if p2 == 0.0 {
                        continue;
                    }
                    recurse(model, policy, horizon, cap, s2, prob * pa * p2, steps, entries)?;
                }
            }
            steps.pop();
        }
        Ok(())
    }

    for (s0, &p0) in model.initial_dist().iter().enumerate() {
        if p0 == 0.0 {
            continue;
        }
        recurse(model, policy, horizon, cap, s0, p0, &mut steps, &mut entries)?;
    }
    Ok(EnumerationTable { entries, horizon })
}

/// Central finite-difference gradient of an arbitrary scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = x.to_vec();
    (0..x.len())
        .map(|k| {
            work[k] = x[k] + step;
            let up = f(&work);
            work[k] = x[k] - step;
            let down = f(&work);
            work[k] = x[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative disagreement `|a - b| / max(|a|, |b|, floor)` measured in L2.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "dimension mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Exact `[grad_theta lambda_H(theta)]^T r` by forward-mode differentiation
/// of the state-distribution flow.
///
/// Maintains the state distribution `p_t` and its Jacobian `D_t = dp_t /
/// dtheta` (a `d x S` matrix), advancing both through the policy-coupled
/// transition kernel. Cost is `O(H S^2 A d)` — tiny-model territory — but the
/// route is exact and entirely independent of trajectory sampling and
/// score-function identities.
pub fn flow_jacobian_apply<F: FeatureMap>(
    model: &MdpModel,
    fm: &F,
    theta: &[f64],
    r: &[f64],
    horizon: usize,
) -> Vec<f64> {
    let (ns, na, d) = (model.num_states(), model.num_actions(), fm.dim());
    assert_eq!(r.len(), ns * na, "quasi-reward length mismatch");
    let gamma = model.discount();

    // Policy probabilities and log-policy gradients at every (s, a).
    let pol = policy::policy_matrix(fm, theta);
    let mut score = vec![0.0; ns * na * d];
    let mut ws = GradWorkspace::new(fm);
    for s in 0..ns {
        for a in 0..na {
            let mut g = vec![0.0; d];
            policy::log_policy_grad_into(fm, theta, s, a, &mut ws, &mut g);
            score[(s * na + a) * d..][..d].copy_from_slice(&g);
        }
    }

    let mut p = model.initial_dist().to_vec();
    let mut dp = vec![0.0; d * ns]; // dp[k * ns + s] = d p(s) / d theta_k
    let mut out = vec![0.0; d];
    let mut disc = 1.0;

    for t in 0..horizon {
        // Accumulate d/dtheta of gamma^t * sum_{s,a} p(s) pi(a|s) r(s,a):
        //   p-part: D_t(:, s) * pi(a|s) * r(s,a)
        //   pi-part: p(s) * pi(a|s) * score(s,a) * r(s,a)
        for s in 0..ns {
            for a in 0..na {
                let pa = pol.prob(s, a);
                let rsa = r[s * na + a];
                if rsa == 0.0 || pa == 0.0 {
                    continue;
                }
                let c = disc * pa * rsa;
                for k in 0..d {
                    out[k] += c * dp[k * ns + s];
                }
                if p[s] != 0.0 {
                    let c2 = disc * p[s] * pa * rsa;
                    let sc = &score[(s * na + a) * d..][..d];
                    for k in 0..d {
                        out[k] += c2 * sc[k];
                    }
                }
            }
        }
        disc *= gamma;
        if t + 1 == horizon {
            break;
        }

        // Advance p and D through the kernel.
        let mut p_next = vec![0.0; ns];
        let mut dp_next = vec![0.0; d * ns];
        for s in 0..ns {
            for a in 0..na {
                let pa = pol.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                let row = model.transition_row(s, a);
                let sc = &score[(s * na + a) * d..][..d];
                for (s2, &pr) in row.iter().enumerate() {
                    if pr == 0.0 {
                        continue;
                    }
                    p_next[s2] += p[s] * pa * pr;
                    let w = pa * pr;
                    let w2 = p[s] * pa * pr;
                    for k in 0..d {
                        dp_next[k * ns + s2] += w * dp[k * ns + s] + w2 * sc[k];
                    }
                }
            }
        }
        p = p_next;
        dp = dp_next;
    }
    out
}

/// Exact gradient of `theta -> F(lambda_H(theta))`, cross-checked.
///
/// Route one enumerates every trajectory and takes the exact expectation of
/// the on-policy score-function estimate at the quasi-reward
/// `r = grad F(lambda_H(theta))`. Route two is a central finite difference
/// of the exact truncated utility. The routes must agree to a relative
/// tolerance of `1e-4` or an error is returned; the enumeration value (the
/// analytically exact one) is what comes back.
pub fn exact_policy_gradient<F: FeatureMap>(
    model: &MdpModel,
    fm: &F,
    theta: &[f64],
    utility: &dyn Utility,
    horizon: usize,
    cap: usize,
) -> Result<Vec<f64>, OracleError> {
    let gamma = model.discount();
    let pol = policy::policy_matrix(fm, theta);
    let lambda = exact_occupancy(model, &pol, OccupancyMode::Truncated(horizon));
    let quasi_reward = utility.grad(&lambda.entries);

    let table = enumerate_trajectories(model, &pol, horizon, cap)?;
    let ones = crate::estimator::WeightSequence::ones(horizon);
    let by_enumeration = table.expectation_vec(fm.dim(), |traj| {
        crate::estimator::pg_estimate_with(fm, traj, theta, &ones, &quasi_reward, gamma)
    });

    let by_differences = fd_gradient(
        |th| {
            let p = policy::policy_matrix(fm, th);
            let lam = exact_occupancy(model, &p, OccupancyMode::Truncated(horizon));
            utility.value(&lam.entries)
        },
        theta,
        FD_STEP,
    );

    let rel_err = rel_error(&by_enumeration, &by_differences, 1e-8);
    if rel_err > CROSS_CHECK_RTOL {
        return Err(OracleError::RouteMismatch { rel_err });
    }
    Ok(by_enumeration)
}
