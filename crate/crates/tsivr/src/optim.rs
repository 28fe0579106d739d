//! Truncated stochastic incremental variance-reduced policy gradient.
//!
//! The optimizer maximizes `F(lambda_H(theta))` for a softmax policy and a
//! smooth utility `F`. It runs in epochs of `m` inner iterations. At the
//! start of each epoch (`j = 0`) a large batch of `N` trajectories produces
//! fresh anchor estimates
//!
//! ```text
//! lambda_0 = mean lambda_hat(tau | theta_0)        r_0 = grad F(lambda_0)
//! g_0      = mean g_hat(tau | theta_0, r_0)
//! ```
//!
//! and each inner iteration (`j >= 1`) refreshes both estimates recursively
//! from a small batch of `B` trajectories sampled under the current policy:
//!
//! ```text
//! lambda_j = mean[lambda_hat(tau | theta_j) - lambda_hat_w(tau | theta_j, theta_{j-1})] + lambda_{j-1}
//! r_j      = grad F(lambda_j)
//! g_j      = mean[g_hat(tau | theta_j, r_{j-1}) - g_hat_w(tau | theta_j, theta_{j-1}, r_{j-2})] + g_{j-1}
//! ```
//!
//! Both correction terms share the same batch. The gradient recursion
//! deliberately lags the quasi-rewards by one slot — the on-policy term uses
//! `r_{j-1}` and the weighted term `r_{j-2}` — so that the quasi-rewards are
//! independent of the batch the estimates are formed from; `r_{-1} := r_0`
//! seeds the lag at the anchor.
//!
//! Every update is truncated:
//!
//! ```text
//! theta_{j+1} = theta_j + eta g_j            if eta |g_j| <= delta
//!             = theta_j + delta g_j / |g_j|  otherwise
//! ```
//!
//! so consecutive iterates stay within `delta`, which caps every importance
//! weight at `exp(2 H ell_psi delta)`. Under the epsilon-schedule of
//! [`schedule_from_epsilon`] that cap is exactly `e`.
//!
//! Randomness is organized as one RNG stream per trajectory, derived from
//! `(seed, epoch, inner iteration, trajectory index)`, so runs are exactly
//! reproducible and trajectories may be drawn in any order (or concurrently)
//! without changing results.

use crate::estimator::{self, WeightSequence};
use crate::mdp::{
    discounted_return, exact_occupancy, sample_trajectory, undiscounted_return, MdpModel,
    OccupancyKind, OccupancyMode, OccupancyVector,
};
use crate::policy::{self, FeatureMap, PolicyParams, SoftmaxPolicy};
use crate::utility::Utility;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Importance weights above this threshold abort the run with
/// [`OptimError::WeightExplosion`]. Correctly computed weights satisfy
/// `E[omega_t] = 1`, so by Markov's inequality a weight beyond `1e12` is a
/// once-per-trillion-trajectories event — in practice it means corrupted
/// parameters or a broken sampling setup, and aborting with context beats
/// silently folding the weight into the estimates.
pub const WEIGHT_GUARD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(
        "importance weight {weight:.3e} exceeded {guard:.0e} at epoch {epoch} inner iteration \
         {inner}; the run is diverging (truncation disabled?)"
    )]
    WeightExplosion { epoch: usize, inner: usize, weight: f64, guard: f64 },
    #[error("failed to write checkpoint: {0}")]
    Checkpoint(#[from] crate::policy::PolicyError),
}

/// Hyperparameters of one optimizer run.
#[derive(Debug, Clone)]
pub struct AlgoConfig {
    /// Number of epochs `T`.
    pub num_epochs: usize,
    /// Inner iterations per epoch `m` (the anchor counts as iteration 0).
    pub epoch_len: usize,
    /// Anchor batch size `N`.
    pub anchor_batch: usize,
    /// Inner batch size `B`.
    pub inner_batch: usize,
    /// Sampling horizon `H`.
    pub horizon: usize,
    /// Step size `eta`.
    pub step_size: f64,
    /// Truncation radius `delta`.
    pub trunc_radius: f64,
    /// Master seed; every trajectory stream is derived from it.
    pub seed: u64,
    /// Disable truncation (ablation). The weight guard stays active.
    pub truncation: bool,
    /// Starting parameters; zeros (the uniform policy) when absent.
    pub init_params: Option<Vec<f64>>,
    /// Evaluate the exact infinite-horizon utility of the current policy at
    /// every iteration (tabular models only; costs one linear solve).
    pub track_exact: bool,
    /// When set, write a parameter checkpoint after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl AlgoConfig {
    /// Practical defaults; callers override what they need.
    pub fn new(num_epochs: usize, horizon: usize) -> Self {
        Self {
            num_epochs,
            epoch_len: 10,
            anchor_batch: 100,
            inner_batch: 10,
            horizon,
            step_size: 0.1,
            trunc_radius: 0.01,
            seed: 0,
            truncation: true,
            init_params: None,
            track_exact: false,
            checkpoint_dir: None,
        }
    }

    fn validate(&self) {
        assert!(self.num_epochs > 0, "num_epochs must be positive");
        assert!(self.epoch_len > 0, "epoch_len must be positive");
        assert!(self.anchor_batch > 0, "anchor_batch must be positive");
        assert!(self.inner_batch > 0, "inner_batch must be positive");
        assert!(self.horizon > 0, "horizon must be positive");
        assert!(self.step_size > 0.0 && self.step_size.is_finite(), "step_size must be positive");
        assert!(
            self.trunc_radius > 0.0 && self.trunc_radius.is_finite(),
            "trunc_radius must be positive"
        );
        // Stream derivation packs (epoch, inner, trajectory) into 64 bits.
        assert!(self.num_epochs < (1 << 24), "num_epochs exceeds stream space");
        assert!(self.epoch_len < (1 << 20), "epoch_len exceeds stream space");
        assert!(
            self.anchor_batch < (1 << 20) && self.inner_batch < (1 << 20),
            "batch sizes exceed stream space"
        );
    }
}

/// The estimator state carried between inner iterations.
///
/// After iteration `j` completes, `theta` holds `theta_j`, `theta_prev` holds
/// `theta_{j-1}`, `lambda_est`/`grad_est` hold `lambda_j`/`g_j`, and
/// `quasi_reward`/`quasi_reward_prev` hold `r_j`/`r_{j-1}`. Advancing to the
/// next iteration rotates the parameter pair via the truncated step and the
/// quasi-reward pair via the recursion.
#[derive(Debug, Clone)]
pub struct EpochState {
    pub theta: PolicyParams,
    pub theta_prev: PolicyParams,
    pub lambda_est: OccupancyVector,
    pub quasi_reward: Vec<f64>,
    pub quasi_reward_prev: Vec<f64>,
    pub grad_est: Vec<f64>,
    pub epoch: usize,
    pub inner: usize,
    /// Largest importance weight seen in the batch that produced this state.
    pub max_weight: f64,
}

/// One trace row per iteration (anchor or inner).
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub epoch: usize,
    pub inner: usize,
    /// Trajectories consumed so far, including this iteration's batch.
    pub episodes: u64,
    /// Environment steps consumed so far (`episodes * horizon`).
    pub samples: u64,
    pub grad_norm: f64,
    pub lambda_l1: f64,
    pub step_norm: f64,
    pub trunc_hit: bool,
    pub max_weight: f64,
    /// `F` of the running occupancy estimate.
    pub util_est: f64,
    /// `F` of the exact infinite-horizon occupancy of the current policy,
    /// when tracking is enabled.
    pub util_exact: Option<f64>,
}

/// Per-episode returns (both discountings), in sampling order.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeReturn {
    pub discounted: f64,
    pub undiscounted: f64,
}

/// Everything a run records besides the final parameters.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub episode_returns: Vec<EpisodeReturn>,
    /// Total wall-clock time of the run. Kept out of all CSV output so that
    /// reruns stay byte-identical.
    pub wall_time: Duration,
}

/// Result of a full optimizer run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub theta: PolicyParams,
    pub trace: RunTrace,
}

/// RNG for trajectory `traj` of inner iteration `inner` of `epoch`.
///
/// Packs the coordinates into the ChaCha stream id (epoch 24 bits, inner 20,
/// trajectory 20), so every trajectory draws from its own independent stream
/// of the master-seeded generator.
pub fn trajectory_rng(seed: u64, epoch: usize, inner: usize, traj: usize) -> (ChaCha8Rng, u64) {
    debug_assert!(epoch < (1 << 24) && inner < (1 << 20) && traj < (1 << 20));
    let stream = ((epoch as u64) << 40) | ((inner as u64) << 20) | traj as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (rng, stream)
}

/// Draws a random starting parameter vector, uniform on `[-scale, scale]`
/// per coordinate. Uses the reserved stream id `u64::MAX`, which
/// [`trajectory_rng`] can never produce (its coordinates are bounded well
/// below their fields' capacity), so the draw is independent of every
/// trajectory sampled under the same seed.
pub fn random_init(dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    use rand::Rng as _;
    assert!(scale > 0.0 && scale.is_finite(), "init scale must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..dim).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * scale).collect()
}

/// The truncated update: a plain gradient step while `eta * |g| <= delta`,
/// otherwise a step of length exactly `delta` along `g`. Returns the new
/// parameters and whether truncation was active.
pub fn truncated_step(
    theta: &PolicyParams,
    grad: &[f64],
    step_size: f64,
    trunc_radius: f64,
) -> (PolicyParams, bool) {
    assert_eq!(theta.len(), grad.len(), "gradient dimension mismatch");
    let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (scale, hit) = if step_size * norm <= trunc_radius {
        (step_size, false)
    } else {
        (trunc_radius / norm, true)
    };
    let next: Vec<f64> =
        theta.as_slice().iter().zip(grad).map(|(t, g)| t + scale * g).collect();
    (PolicyParams::new(next), hit)
}

/// The gradient mapping `(theta_plus - theta) / eta` induced by the truncated
/// step; its norm is the stationarity measure the epsilon-schedule targets.
pub fn gradient_mapping(
    theta: &PolicyParams,
    grad: &[f64],
    step_size: f64,
    trunc_radius: f64,
) -> Vec<f64> {
    let (next, _) = truncated_step(theta, grad, step_size, trunc_radius);
    next.as_slice()
        .iter()
        .zip(theta.as_slice())
        .map(|(n, t)| (n - t) / step_size)
        .collect()
}

/// Samples the anchor batch and produces the epoch's initial state.
pub fn epoch_anchor<F: FeatureMap>(
    model: &MdpModel,
    fm: &F,
    utility: &dyn Utility,
    theta: PolicyParams,
    cfg: &AlgoConfig,
    epoch: usize,
    returns: &mut Vec<EpisodeReturn>,
) -> EpochState {
    let gamma = model.discount();
    let n = cfg.anchor_batch;
    let d = fm.dim();
    let sa = fm.num_states() * fm.num_actions();

    let mut batch = Vec::with_capacity(n);
    for k in 0..n {
        let (mut rng, tag) = trajectory_rng(cfg.seed, epoch, 0, k);
        let pol = SoftmaxPolicy::new(fm, theta.as_slice());
        let traj = sample_trajectory(model, &pol, cfg.horizon, &mut rng, tag);
        record_return(model, &traj, gamma, returns);
        batch.push(traj);
    }

    let ones = WeightSequence::ones(cfg.horizon);
    let mut lambda = vec![0.0; sa];
    for traj in &batch {
        let occ = estimator::occupancy_estimate_with(fm, traj, &ones, gamma);
        accumulate(&mut lambda, &occ.entries, 1.0 / n as f64);
    }
    let quasi_reward = utility.grad(&lambda);

    let mut grad = vec![0.0; d];
    for traj in &batch {
        let g = estimator::pg_estimate_with(fm, traj, theta.as_slice(), &ones, &quasi_reward, gamma);
        accumulate(&mut grad, &g, 1.0 / n as f64);
    }

    EpochState {
        theta_prev: theta.clone(),
        theta,
        lambda_est: OccupancyVector { entries: lambda, kind: OccupancyKind::Sampled },
        quasi_reward_prev: quasi_reward.clone(),
        quasi_reward,
        grad_est: grad,
        epoch,
        inner: 0,
        max_weight: 1.0,
    }
}

/// One variance-reduced inner iteration.
///
/// Expects `state.theta = theta_j` (already stepped), `state.theta_prev =
/// theta_{j-1}`, with the estimates, quasi-rewards and `state.inner` still at
/// iteration `j - 1`. Consumes `B` fresh trajectories under `theta_j` and
/// returns the state advanced to iteration `j`.
pub fn inner_update<F: FeatureMap>(
    model: &MdpModel,
    fm: &F,
    utility: &dyn Utility,
    state: EpochState,
    cfg: &AlgoConfig,
    returns: &mut Vec<EpisodeReturn>,
) -> Result<EpochState, OptimError> {
    let gamma = model.discount();
    let b = cfg.inner_batch;
    let d = fm.dim();
    let sa = fm.num_states() * fm.num_actions();
    let j = state.inner + 1;

    let theta_j = state.theta.as_slice();
    let theta_prev = state.theta_prev.as_slice();
    let ones = WeightSequence::ones(cfg.horizon);

    let mut lambda = vec![0.0; sa];
    let mut grad = vec![0.0; d];
    let mut max_weight: f64 = 1.0;
    for k in 0..b {
        let (mut rng, tag) = trajectory_rng(cfg.seed, state.epoch, j, k);
        let pol = SoftmaxPolicy::new(fm, theta_j);
        let traj = sample_trajectory(model, &pol, cfg.horizon, &mut rng, tag);
        record_return(model, &traj, gamma, returns);

        let weights = estimator::importance_weights(fm, &traj, theta_j, theta_prev);
        max_weight = max_weight.max(weights.max_weight());
        guard_weights(max_weight, state.epoch, j)?;

        let on_policy = estimator::occupancy_estimate_with(fm, &traj, &ones, gamma);
        let weighted = estimator::occupancy_estimate_with(fm, &traj, &weights, gamma);
        accumulate(&mut lambda, &on_policy.entries, 1.0 / b as f64);
        accumulate(&mut lambda, &weighted.entries, -1.0 / b as f64);

        let g_on =
            estimator::pg_estimate_with(fm, &traj, theta_j, &ones, &state.quasi_reward, gamma);
        let g_w = estimator::pg_estimate_with(
            fm,
            &traj,
            theta_prev,
            &weights,
            &state.quasi_reward_prev,
            gamma,
        );
        accumulate(&mut grad, &g_on, 1.0 / b as f64);
        accumulate(&mut grad, &g_w, -1.0 / b as f64);
    }
    accumulate(&mut lambda, &state.lambda_est.entries, 1.0);
    accumulate(&mut grad, &state.grad_est, 1.0);

    let quasi_reward = utility.grad(&lambda);
    Ok(EpochState {
        theta: state.theta,
        theta_prev: state.theta_prev,
        lambda_est: OccupancyVector { entries: lambda, kind: OccupancyKind::Sampled },
        quasi_reward_prev: state.quasi_reward,
        quasi_reward,
        grad_est: grad,
        epoch: state.epoch,
        inner: j,
        max_weight,
    })
}

/// Full optimizer run: `num_epochs` epochs of an anchor plus `epoch_len - 1`
/// inner iterations, with one truncated step per iteration.
pub fn run<F: FeatureMap>(
    model: &MdpModel,
    fm: &F,
    utility: &dyn Utility,
    cfg: &AlgoConfig,
) -> Result<RunResult, OptimError> {
    cfg.validate();
    let start = Instant::now();
    let d = fm.dim();
    let mut theta = match &cfg.init_params {
        Some(v) => {
            assert_eq!(v.len(), d, "init_params dimension mismatch");
            PolicyParams::new(v.clone())
        }
        None => PolicyParams::zeros(d),
    };

    let mut trace = RunTrace::default();
    let mut episodes: u64 = 0;
    let mut iter = 0usize;

    for epoch in 0..cfg.num_epochs {
        let mut state =
            epoch_anchor(model, fm, utility, theta.clone(), cfg, epoch, &mut trace.episode_returns);
        episodes += cfg.anchor_batch as u64;

        for j in 0..cfg.epoch_len {
            let (next, hit) = if cfg.truncation {
                truncated_step(&state.theta, &state.grad_est, cfg.step_size, cfg.trunc_radius)
            } else {
                let stepped: Vec<f64> = state
                    .theta
                    .as_slice()
                    .iter()
                    .zip(&state.grad_est)
                    .map(|(t, g)| t + cfg.step_size * g)
                    .collect();
                (PolicyParams::new(stepped), false)
            };
            let step_norm: f64 = next
                .as_slice()
                .iter()
                .zip(state.theta.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();

            trace.rows.push(TraceRow {
                iter,
                epoch,
                inner: j,
                episodes,
                samples: episodes * cfg.horizon as u64,
                grad_norm: norm(&state.grad_est),
                lambda_l1: state.lambda_est.l1_norm(),
                step_norm,
                trunc_hit: hit,
                max_weight: state.max_weight,
                util_est: utility.value(&state.lambda_est.entries),
                util_exact: cfg.track_exact.then(|| {
                    let pol = policy::policy_matrix(fm, state.theta.as_slice());
                    let lam = exact_occupancy(model, &pol, OccupancyMode::Infinite);
                    utility.value(&lam.entries)
                }),
            });
            iter += 1;

            if j + 1 < cfg.epoch_len {
                state.theta_prev = std::mem::replace(&mut state.theta, next);
                state = inner_update(model, fm, utility, state, cfg, &mut trace.episode_returns)?;
                episodes += cfg.inner_batch as u64;
            } else {
                theta = next;
            }
        }

        if let Some(dir) = &cfg.checkpoint_dir {
            write_checkpoint(dir, fm, epoch, &theta, &state)?;
        }
    }

    trace.wall_time = start.elapsed();
    Ok(RunResult { theta, trace })
}

/// Writes the end-of-epoch parameters plus SHA-256 digests of the carried
/// estimator state, for auditing resumed or re-run experiments.
fn write_checkpoint<F: FeatureMap>(
    dir: &std::path::Path,
    fm: &F,
    epoch: usize,
    theta: &PolicyParams,
    state: &EpochState,
) -> Result<(), OptimError> {
    std::fs::create_dir_all(dir).map_err(crate::policy::PolicyError::Io)?;
    let path = dir.join(format!("epoch_{epoch:04}.txt"));
    let comments = vec![
        format!("epoch {epoch}"),
        format!("lambda_sha256 {}", hex_digest(&state.lambda_est.entries)),
        format!("quasi_reward_sha256 {}", hex_digest(&state.quasi_reward)),
        format!("grad_sha256 {}", hex_digest(&state.grad_est)),
    ];
    policy::save_params(path, fm, theta, &comments)?;
    Ok(())
}

fn hex_digest(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn record_return(
    model: &MdpModel,
    traj: &crate::mdp::Trajectory,
    gamma: f64,
    returns: &mut Vec<EpisodeReturn>,
) {
    if let Some(reward) = model.reward() {
        returns.push(EpisodeReturn {
            discounted: discounted_return(traj, reward, model.num_actions(), gamma),
            undiscounted: undiscounted_return(traj, reward, model.num_actions()),
        });
    }
}

fn guard_weights(max_weight: f64, epoch: usize, inner: usize) -> Result<(), OptimError> {
    if max_weight > WEIGHT_GUARD {
        return Err(OptimError::WeightExplosion {
            epoch,
            inner,
            weight: max_weight,
            guard: WEIGHT_GUARD,
        });
    }
    Ok(())
}

pub(crate) fn accumulate(acc: &mut [f64], values: &[f64], scale: f64) {
    debug_assert_eq!(acc.len(), values.len());
    for (a, v) in acc.iter_mut().zip(values) {
        *a += scale * v;
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The epsilon-schedule: parameters that guarantee an epsilon-stationary
/// point in expectation for gradient-dominated-free problems, plus the epoch
/// count for the gradient-dominated (global) regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub horizon: usize,
    pub trunc_radius: f64,
    pub inner_batch: usize,
    pub epoch_len: usize,
    pub anchor_batch: usize,
    /// Epochs for epsilon-stationarity.
    pub num_epochs: usize,
    /// Epochs for epsilon-optimality under gradient domination.
    pub num_epochs_global: usize,
    /// Headline sample count `T * m * (B * H + N)` of the schedule.
    pub sample_bound: u64,
}

/// Derives the schedule from a target accuracy `epsilon`:
/// `H = ceil(2 log(1/eps) / (1 - gamma))`, `delta = 1 / (2 H ell_psi)`,
/// `B = m = T = ceil(1/eps)`, `N = ceil(1/eps^2)`, and
/// `T_global = ceil(log2(1/eps))`.
///
/// `delta` is computed from the *rounded* horizon, so the weight cap
/// `exp(2 H ell_psi delta)` equals `e` exactly.
pub fn schedule_from_epsilon(epsilon: f64, gamma: f64, ell_psi: f64) -> Schedule {
    assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
    assert!(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    assert!(ell_psi > 0.0, "ell_psi must be positive");
    let horizon = (2.0 * (1.0 / epsilon).ln() / (1.0 - gamma)).ceil() as usize;
    let horizon = horizon.max(1);
    let inv = (1.0 / epsilon).ceil() as usize;
    let anchor = (1.0 / (epsilon * epsilon)).ceil() as usize;
    let global = (1.0 / epsilon).log2().ceil().max(1.0) as usize;
    Schedule {
        horizon,
        trunc_radius: 1.0 / (2.0 * horizon as f64 * ell_psi),
        inner_batch: inv,
        epoch_len: inv,
        anchor_batch: anchor,
        num_epochs: inv,
        num_epochs_global: global,
        sample_bound: (inv as u64)
            * (inv as u64)
            * ((inv as u64) * (horizon as u64) + anchor as u64),
    }
}

/// The smoothness and variance constants of the analysis, evaluated verbatim
/// from their closed forms.
#[derive(Debug, Clone)]
pub struct ConstantSet {
    /// Smoothness `L_theta` of `theta -> F(lambda(theta))`.
    pub l_theta: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// The analysis step size `1 / (1 + (C3 + C4) / L_theta^2) * 1 / (2 L_theta)`.
    pub eta: f64,
    /// Bound on the true gradient norm: `2 ell_psi ell_lam_inf / (1-gamma)^2`.
    pub grad_norm_bound: f64,
}

/// Evaluates the constants for a `(feature map, utility, schedule)` triple.
///
/// `ell_psi`/`l_psi` bound the feature map's gradient and Hessian;
/// `ell_lam_inf`, `l_lam` and `l_lam_inf` are the utility's declared
/// constants; `horizon` and `delta` come from the schedule.
#[allow(clippy::too_many_arguments)]
pub fn compute_constants(
    ell_psi: f64,
    l_psi: f64,
    ell_lam_inf: f64,
    l_lam: f64,
    l_lam_inf: f64,
    gamma: f64,
    horizon: usize,
    delta: f64,
) -> ConstantSet {
    assert!(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    let h = horizon as f64;
    let om = 1.0 - gamma;
    let l_theta = 4.0 * l_lam_inf * ell_psi.powi(2) / om.powi(4)
        + 8.0 * ell_psi.powi(2) * ell_lam_inf / om.powi(3)
        + 2.0 * ell_lam_inf * (l_psi + ell_psi.powi(2)) / om.powi(2);
    let c1 = 112.0 * ell_psi.powi(2) * l_lam.powi(2) / om.powi(6)
        + 12.0 * ell_lam_inf.powi(2) / om.powi(4);
    let c2 = 32.0 * ell_psi.powi(2) * l_lam.powi(2) / om.powi(6)
        + 64.0
            * ell_psi.powi(2)
            * ell_lam_inf.powi(2)
            * ((h + 1.0).powi(2) / om.powi(2) + 1.0 / om.powi(4));
    let weight_cap = (2.0 * h * ell_psi * delta).exp() + 1.0;
    let c3 = 48.0 * (ell_psi + l_psi).powi(2) * ell_lam_inf.powi(2) / om.powi(4)
        + 96.0 * h * ell_lam_inf.powi(2) * (8.0 * ell_psi.powi(2) + l_psi) * weight_cap
            / om.powi(5)
            * (12.0 * ell_lam_inf.powi(2) + 4.0 * l_lam.powi(2) / (3.0 * om.powi(2)));
    let c4 =
        32.0 * h * ell_psi.powi(2) * l_lam.powi(2) * (8.0 * ell_psi.powi(2) + l_psi) * weight_cap
            / om.powi(7);
    let eta = 1.0 / (1.0 + (c3 + c4) / l_theta.powi(2)) / (2.0 * l_theta);
    ConstantSet {
        l_theta,
        c1,
        c2,
        c3,
        c4,
        eta,
        grad_norm_bound: 2.0 * ell_psi * ell_lam_inf / om.powi(2),
    }
}

/// The per-step importance-weight variance coefficient
/// `C_omega(t) = t (4 ell_psi^2 (t + 1/2) + 2 L_psi) (e^{4 delta t} + 1)`.
pub fn weight_variance_coeff(t: f64, ell_psi: f64, l_psi: f64, delta: f64) -> f64 {
    t * (4.0 * ell_psi.powi(2) * (t + 0.5) + 2.0 * l_psi) * ((4.0 * delta * t).exp() + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use crate::oracle;
    use crate::policy::TabularFeatures;
    use crate::utility::LinearUtility;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn linear_env_utility(model: &MdpModel) -> LinearUtility {
        LinearUtility::new(model.reward().unwrap().to_vec())
    }

    #[test]
    fn truncated_step_inside_region_is_plain_gradient_ascent() {
        let theta = PolicyParams::new(vec![1.0, -1.0]);
        let grad = vec![0.3, 0.4]; // norm 0.5
        let (next, hit) = truncated_step(&theta, &grad, 0.1, 0.1);
        assert!(!hit, "eta |g| = 0.05 <= delta = 0.1 must not truncate");
        assert!((next.as_slice()[0] - 1.03).abs() < 1e-15);
        assert!((next.as_slice()[1] - (-0.96)).abs() < 1e-15);
    }

    #[test]
    fn truncated_step_clamps_to_radius() {
        let theta = PolicyParams::new(vec![0.0, 0.0]);
        let grad = vec![3.0, 4.0]; // norm 5
        let (next, hit) = truncated_step(&theta, &grad, 1.0, 0.5);
        assert!(hit);
        let norm: f64 = next.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.5).abs() < 1e-15, "step length {norm} must be exactly delta");
        // Direction preserved.
        assert!((next.as_slice()[0] / next.as_slice()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let a = random_init(64, 0.5, 7);
        let b = random_init(64, 0.5, 7);
        let c = random_init(64, 0.5, 8);
        assert_eq!(a, b, "same seed must reproduce the same draw");
        assert_ne!(a, c, "different seeds must draw different parameters");
        assert!(a.iter().all(|v| v.abs() <= 0.5));
        assert!(a.iter().any(|v| v.abs() > 0.05), "draw collapsed toward zero");
    }

    #[test]
    fn truncated_step_zero_gradient_is_fixed_point() {
        let theta = PolicyParams::new(vec![0.7, -0.2]);
        let (next, hit) = truncated_step(&theta, &[0.0, 0.0], 0.5, 0.1);
        assert!(!hit);
        assert_eq!(next.as_slice(), theta.as_slice());
        let gm = gradient_mapping(&theta, &[0.0, 0.0], 0.5, 0.1);
        assert!(gm.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_mapping_equals_grad_inside_region() {
        let theta = PolicyParams::new(vec![0.0, 0.0, 0.0]);
        let grad = vec![0.01, -0.02, 0.005];
        let gm = gradient_mapping(&theta, &grad, 0.1, 1.0);
        for (a, b) in gm.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn schedule_example_values() {
        let s = schedule_from_epsilon(0.1, 0.99, 1.0);
        assert_eq!(s.horizon, 461); // ceil(2 ln 10 / 0.01)
        assert_eq!(s.inner_batch, 10);
        assert_eq!(s.epoch_len, 10);
        assert_eq!(s.anchor_batch, 100);
        assert_eq!(s.num_epochs, 10);
        assert!((s.trunc_radius - 1.0 / 922.0).abs() < 1e-15);
        // Weight cap exp(2 H delta) is exactly e by construction.
        let cap = (2.0 * s.horizon as f64 * s.trunc_radius).exp();
        assert!((cap - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(s.num_epochs_global, 4); // ceil(log2 10)
        assert_eq!(s.sample_bound, 10 * 10 * (10 * 461 + 100));
    }

    #[test]
    fn constants_tabular_linear_example() {
        // Tabular map (ell = 1, L = 0), |r|_inf = 1, gamma = 0.9:
        // L_theta = 8/(0.1)^3 + 2/(0.1)^2 = 8200.
        let c = compute_constants(1.0, 0.0, 1.0, 0.0, 0.0, 0.9, 10, 0.05);
        assert!((c.l_theta - 8200.0).abs() < 1e-9, "L_theta = {}", c.l_theta);
        assert!((c.grad_norm_bound - 200.0).abs() < 1e-9);
        // Linear utility kills every L_lam-proportional term in C1 and C4.
        assert!((c.c1 - 12.0 / 0.1f64.powi(4)).abs() < 1e-6);
        assert!(c.c4 == 0.0);
        assert!(c.eta > 0.0 && c.eta < 1.0 / (2.0 * c.l_theta) + 1e-12);
    }

    #[test]
    fn weight_variance_coeff_example() {
        // t = 1, ell = 1, L = 0, delta = 0: 1 * (4 * 1.5) * 2 = 12.
        assert!((weight_variance_coeff(1.0, 1.0, 0.0, 0.0) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_state_satisfies_reward_lag_seeding() {
        let model = envs::two_state_switch();
        let fm = TabularFeatures::new(2, 2);
        let utility = linear_env_utility(&model);
        let cfg = AlgoConfig { anchor_batch: 8, horizon: 12, ..AlgoConfig::new(1, 12) };
        let mut returns = Vec::new();
        let state = epoch_anchor(
            &model,
            &fm,
            &utility,
            PolicyParams::zeros(4),
            &cfg,
            0,
            &mut returns,
        );
        assert_eq!(state.quasi_reward, state.quasi_reward_prev, "r_{{-1}} := r_0");
        assert_eq!(state.inner, 0);
        assert_eq!(returns.len(), 8);
        assert_eq!(state.max_weight, 1.0);
        // Linear utility: quasi-reward equals the reward table everywhere.
        assert_eq!(state.quasi_reward, model.reward().unwrap());
    }

    #[test]
    fn inner_update_with_identical_parameters_changes_nothing() {
        // If theta_j == theta_{j-1} and the quasi-rewards coincide, both
        // correction terms vanish exactly per trajectory.
        let model = envs::two_state_switch();
        let fm = TabularFeatures::new(2, 2);
        let utility = linear_env_utility(&model);
        let cfg = AlgoConfig { anchor_batch: 4, inner_batch: 6, horizon: 10, ..AlgoConfig::new(1, 10) };
        let mut returns = Vec::new();
        let state = epoch_anchor(
            &model,
            &fm,
            &utility,
            PolicyParams::zeros(4),
            &cfg,
            0,
            &mut returns,
        );
        let lambda_before = state.lambda_est.clone();
        let grad_before = state.grad_est.clone();
        // theta == theta_prev already holds after the anchor.
        let next = inner_update(&model, &fm, &utility, state, &cfg, &mut returns).unwrap();
        assert_eq!(next.lambda_est.entries, lambda_before.entries);
        assert_eq!(next.grad_est, grad_before);
        assert_eq!(next.inner, 1);
        assert_eq!(next.max_weight, 1.0);
    }

    #[test]
    fn inner_update_estimates_are_conditionally_unbiased() {
        // Enumerate all batch trajectories: E[lambda_j] must equal
        // lambda_H(theta_j) + (lambda_{j-1} - lambda_H(theta_{j-1})), and
        // E[g_j] similarly with the flow Jacobian at the lagged rewards.
        let model = envs::two_state_switch();
        let fm = TabularFeatures::new(2, 2);
        let utility = linear_env_utility(&model);
        let gamma = model.discount();
        let h = 5;
        let cfg = AlgoConfig { anchor_batch: 3, inner_batch: 1, horizon: h, ..AlgoConfig::new(1, h) };
        let mut returns = Vec::new();
        let mut state = epoch_anchor(
            &model,
            &fm,
            &utility,
            PolicyParams::zeros(4),
            &cfg,
            0,
            &mut returns,
        );
        // Move to a distinct theta_j within delta.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stepped: Vec<f64> =
            state.theta.as_slice().iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
        state.theta_prev = std::mem::replace(&mut state.theta, PolicyParams::new(stepped));

        let theta_j = state.theta.as_slice().to_vec();
        let theta_prev = state.theta_prev.as_slice().to_vec();
        let pol_j = crate::policy::policy_matrix(&fm, &theta_j);
        let table = oracle::enumerate_trajectories(&model, &pol_j, h, 1 << 20).unwrap();

        let lam_j = exact_occupancy(&model, &pol_j, OccupancyMode::Truncated(h));
        let pol_prev = crate::policy::policy_matrix(&fm, &theta_prev);
        let lam_prev = exact_occupancy(&model, &pol_prev, OccupancyMode::Truncated(h));

        // E over the single-trajectory batch of the lambda recursion.
        let expected_lambda = table.expectation_vec(4, |traj| {
            let w = estimator::importance_weights(&fm, traj, &theta_j, &theta_prev);
            let ones = WeightSequence::ones(h);
            let on = estimator::occupancy_estimate_with(&fm, traj, &ones, gamma);
            let wd = estimator::occupancy_estimate_with(&fm, traj, &w, gamma);
            (0..4)
                .map(|k| on.entries[k] - wd.entries[k] + state.lambda_est.entries[k])
                .collect()
        });
        for k in 0..4 {
            let want = lam_j.entries[k] + (state.lambda_est.entries[k] - lam_prev.entries[k]);
            assert!(
                (expected_lambda[k] - want).abs() < 1e-12,
                "lambda martingale broken at {k}: {} vs {want}",
                expected_lambda[k]
            );
        }

        // E over the batch of the gradient recursion, against the exact flow
        // Jacobians at the lagged quasi-rewards.
        let r_prev = state.quasi_reward.clone();
        let r_prev2 = state.quasi_reward_prev.clone();
        let expected_grad = table.expectation_vec(4, |traj| {
            let w = estimator::importance_weights(&fm, traj, &theta_j, &theta_prev);
            let ones = WeightSequence::ones(h);
            let on = estimator::pg_estimate_with(&fm, traj, &theta_j, &ones, &r_prev, gamma);
            let wd = estimator::pg_estimate_with(&fm, traj, &theta_prev, &w, &r_prev2, gamma);
            (0..4).map(|k| on[k] - wd[k] + state.grad_est[k]).collect()
        });
        let jac_j = oracle::flow_jacobian_apply(&model, &fm, &theta_j, &r_prev, h);
        let jac_prev = oracle::flow_jacobian_apply(&model, &fm, &theta_prev, &r_prev2, h);
        for k in 0..4 {
            let want = jac_j[k] + (state.grad_est[k] - jac_prev[k]);
            assert!(
                (expected_grad[k] - want).abs() < 1e-12,
                "gradient martingale broken at {k}: {} vs {want}",
                expected_grad[k]
            );
        }
    }

    #[test]
    fn run_is_deterministic_and_counts_episodes() {
        let model = envs::two_state_switch();
        let fm = TabularFeatures::new(2, 2);
        let utility = linear_env_utility(&model);
        let cfg = AlgoConfig {
            num_epochs: 3,
            epoch_len: 4,
            anchor_batch: 6,
            inner_batch: 2,
            horizon: 8,
            seed: 42,
            ..AlgoConfig::new(3, 8)
        };
        let a = run(&model, &fm, &utility, &cfg).unwrap();
        let b = run(&model, &fm, &utility, &cfg).unwrap();
        assert_eq!(a.theta.as_slice(), b.theta.as_slice(), "same seed, same result");
        assert_eq!(a.trace.rows.len(), 12);
        // Episodes: per epoch 6 + 3 * 2 = 12, so 36 in total.
        assert_eq!(a.trace.episode_returns.len(), 36);
        assert_eq!(a.trace.rows.last().unwrap().episodes, 36);
        assert_eq!(
            a.trace.rows.last().unwrap().samples,
            36 * 8,
            "samples must be episodes * horizon"
        );

        let c = AlgoConfig { seed: 43, ..cfg };
        let diff = run(&model, &fm, &utility, &c).unwrap();
        assert_ne!(a.theta.as_slice(), diff.theta.as_slice(), "different seed, different result");
    }

    #[test]
    fn every_step_respects_truncation_radius() {
        let model = envs::three_state_chain();
        let fm = TabularFeatures::new(3, 2);
        let utility = linear_env_utility(&model);
        let cfg = AlgoConfig {
            num_epochs: 4,
            epoch_len: 5,
            anchor_batch: 10,
            inner_batch: 3,
            horizon: 15,
            step_size: 5.0, // force frequent truncation
            trunc_radius: 0.05,
            seed: 7,
            ..AlgoConfig::new(4, 15)
        };
        let result = run(&model, &fm, &utility, &cfg).unwrap();
        assert!(result.trace.rows.iter().any(|r| r.trunc_hit), "expected truncation to engage");
        for row in &result.trace.rows {
            assert!(
                row.step_norm <= cfg.trunc_radius * (1.0 + 1e-12),
                "iteration {}: step norm {} exceeds delta",
                row.iter,
                row.step_norm
            );
        }
    }

    #[test]
    fn epoch_len_one_degenerates_to_anchor_only() {
        // With m = 1 every iteration is an anchor: the run must match a hand
        // loop of epoch_anchor + truncated_step.
        let model = envs::two_state_switch();
        let fm = TabularFeatures::new(2, 2);
        let utility = linear_env_utility(&model);
        let cfg = AlgoConfig {
            num_epochs: 5,
            epoch_len: 1,
            anchor_batch: 7,
            inner_batch: 3,
            horizon: 9,
            seed: 21,
            ..AlgoConfig::new(5, 9)
        };
        let result = run(&model, &fm, &utility, &cfg).unwrap();

        let mut theta = PolicyParams::zeros(4);
        let mut returns = Vec::new();
        for epoch in 0..5 {
            let state =
                epoch_anchor(&model, &fm, &utility, theta.clone(), &cfg, epoch, &mut returns);
            let (next, _) =
                truncated_step(&state.theta, &state.grad_est, cfg.step_size, cfg.trunc_radius);
            theta = next;
        }
        assert_eq!(result.theta.as_slice(), theta.as_slice());
        assert_eq!(result.trace.episode_returns.len(), returns.len());
    }

    #[test]
    fn weight_guard_rejects_explosions_with_context() {
        assert!(guard_weights(WEIGHT_GUARD, 3, 2).is_ok(), "guard is strict");
        let err = guard_weights(2e12, 3, 2).unwrap_err();
        match &err {
            OptimError::WeightExplosion { epoch, inner, weight, guard } => {
                assert_eq!((*epoch, *inner), (3, 2));
                assert!(*weight > *guard);
            }
            other => panic!("unexpected error {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("epoch 3") && msg.contains("inner iteration 2"), "{msg}");
    }

    #[test]
    fn untruncated_overshoot_saturates_without_exploding_weights() {
        // With truncation disabled and an absurd step size the softmax
        // saturates after one step. Sampled importance weights still cannot
        // explode (E[omega] = 1 and the saturated policy never draws the
        // explosive path), so the run must finish with finite estimates.
        let model = envs::two_state_switch();
        let fm = TabularFeatures::new(2, 2);
        let utility = linear_env_utility(&model);
        let cfg = AlgoConfig {
            num_epochs: 10,
            epoch_len: 4,
            anchor_batch: 4,
            inner_batch: 2,
            horizon: 30,
            step_size: 2e4,
            truncation: false,
            seed: 3,
            ..AlgoConfig::new(10, 30)
        };
        let result = run(&model, &fm, &utility, &cfg).unwrap();
        for row in &result.trace.rows {
            assert!(row.grad_norm.is_finite() && row.util_est.is_finite());
            assert!(row.max_weight <= WEIGHT_GUARD);
            assert!(!row.trunc_hit, "truncation is disabled");
        }
        assert!(result.theta.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoints_are_written_per_epoch() {
        let model = envs::two_state_switch();
        let fm = TabularFeatures::new(2, 2);
        let utility = linear_env_utility(&model);
        let dir = tempfile::tempdir().unwrap();
        let cfg = AlgoConfig {
            num_epochs: 3,
            epoch_len: 2,
            anchor_batch: 3,
            inner_batch: 2,
            horizon: 6,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..AlgoConfig::new(3, 6)
        };
        let result = run(&model, &fm, &utility, &cfg).unwrap();
        for epoch in 0..3 {
            let path = dir.path().join(format!("epoch_{epoch:04}.txt"));
            assert!(path.exists(), "missing checkpoint {path:?}");
        }
        let last = policy::load_params(dir.path().join("epoch_0002.txt"), &fm).unwrap();
        assert_eq!(last.as_slice(), result.theta.as_slice());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn truncated_step_never_exceeds_delta(
            theta in proptest::collection::vec(-3.0f64..3.0, 4),
            grad in proptest::collection::vec(-100.0f64..100.0, 4),
            eta in 1e-3f64..10.0,
            delta in 1e-3f64..1.0,
        ) {
            let params = PolicyParams::new(theta);
            let (next, _) = truncated_step(&params, &grad, eta, delta);
            let norm: f64 = next
                .as_slice()
                .iter()
                .zip(params.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            prop_assert!(norm <= delta * (1.0 + 1e-12));
        }

        #[test]
        fn gradient_mapping_norm_bounded_by_delta_over_eta(
            grad in proptest::collection::vec(-50.0f64..50.0, 3),
            eta in 1e-3f64..5.0,
            delta in 1e-3f64..0.5,
        ) {
            let theta = PolicyParams::zeros(3);
            let gm = gradient_mapping(&theta, &grad, eta, delta);
            let norm: f64 = gm.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= delta / eta * (1.0 + 1e-12));
        }
    }
}
