//! On-policy policy-gradient baseline.
//!
//! Each iteration samples a fresh batch under the current policy, forms the
//! quasi-reward from the batch-mean occupancy estimate,
//!
//! ```text
//! lambda_bar = mean lambda_hat(tau | theta)      r = grad F(lambda_bar)
//! g          = mean g_hat(tau | theta, r)
//! ```
//!
//! and takes a plain (untruncated) ascent step `theta <- theta + eta g`.
//! No estimate survives across iterations, so the per-iteration variance is
//! the raw single-batch variance — the quantity the variance-reduced
//! recursion in [`crate::optim`] improves on. Trajectory seeding matches the
//! optimizer (one stream per `(seed, iteration, trajectory)`), making the two
//! directly comparable under a shared seed.

use crate::estimator::{self, WeightSequence};
use crate::mdp::{exact_occupancy, sample_trajectory, MdpModel, OccupancyMode};
use crate::optim::{
    accumulate, norm, record_return, trajectory_rng, EpisodeReturn, RunResult, RunTrace, TraceRow,
};
use crate::policy::{self, FeatureMap, PolicyParams, SoftmaxPolicy};
use crate::utility::Utility;
use std::time::Instant;

/// Hyperparameters of one baseline run.
#[derive(Debug, Clone)]
pub struct ReinforceConfig {
    /// Number of gradient steps.
    pub num_iters: usize,
    /// Trajectories per step.
    pub batch: usize,
    /// Sampling horizon.
    pub horizon: usize,
    /// Step size.
    pub step_size: f64,
    /// Master seed; shares the optimizer's stream layout.
    pub seed: u64,
    /// Starting parameters; zeros (the uniform policy) when absent.
    pub init_params: Option<Vec<f64>>,
    /// Evaluate the exact infinite-horizon utility at every iteration.
    pub track_exact: bool,
}

impl ReinforceConfig {
    pub fn new(num_iters: usize, horizon: usize) -> Self {
        Self {
            num_iters,
            batch: 10,
            horizon,
            step_size: 0.1,
            seed: 0,
            init_params: None,
            track_exact: false,
        }
    }

    fn validate(&self) {
        assert!(self.num_iters > 0, "num_iters must be positive");
        assert!(self.batch > 0, "batch must be positive");
        assert!(self.horizon > 0, "horizon must be positive");
        assert!(self.step_size > 0.0 && self.step_size.is_finite(), "step_size must be positive");
        assert!(self.num_iters < (1 << 24), "num_iters exceeds stream space");
        assert!(self.batch < (1 << 20), "batch exceeds stream space");
    }
}

/// The per-iteration estimates: batch-mean occupancy, the quasi-reward
/// derived from it, and the batch-mean gradient at that quasi-reward.
#[derive(Debug, Clone)]
pub struct ReinforceStep {
    pub lambda_est: Vec<f64>,
    pub quasi_reward: Vec<f64>,
    pub grad_est: Vec<f64>,
    pub max_weight: f64,
}

/// Samples one batch under `theta` and forms the step estimates. Iteration
/// index `iter` selects the trajectory streams.
pub fn reinforce_step<F: FeatureMap>(
    model: &MdpModel,
    fm: &F,
    utility: &dyn Utility,
    theta: &PolicyParams,
    cfg: &ReinforceConfig,
    iter: usize,
    returns: &mut Vec<EpisodeReturn>,
) -> ReinforceStep {
    let gamma = model.discount();
    let b = cfg.batch;
    let sa = fm.num_states() * fm.num_actions();

    let mut batch = Vec::with_capacity(b);
    for k in 0..b {
        let (mut rng, tag) = trajectory_rng(cfg.seed, iter, 0, k);
        let pol = SoftmaxPolicy::new(fm, theta.as_slice());
        let traj = sample_trajectory(model, &pol, cfg.horizon, &mut rng, tag);
        record_return(model, &traj, gamma, returns);
        batch.push(traj);
    }

    let ones = WeightSequence::ones(cfg.horizon);
    let mut lambda = vec![0.0; sa];
    for traj in &batch {
        let occ = estimator::occupancy_estimate_with(fm, traj, &ones, gamma);
        accumulate(&mut lambda, &occ.entries, 1.0 / b as f64);
    }
    let quasi_reward = utility.grad(&lambda);

    let mut grad = vec![0.0; fm.dim()];
    for traj in &batch {
        let g =
            estimator::pg_estimate_with(fm, traj, theta.as_slice(), &ones, &quasi_reward, gamma);
        accumulate(&mut grad, &g, 1.0 / b as f64);
    }

    ReinforceStep { lambda_est: lambda, quasi_reward, grad_est: grad, max_weight: 1.0 }
}

/// Full baseline run; the trace uses the same row schema as the optimizer
/// (`epoch` = iteration, `inner` = 0, truncation never fires).
pub fn run_reinforce<F: FeatureMap>(
    model: &MdpModel,
    fm: &F,
    utility: &dyn Utility,
    cfg: &ReinforceConfig,
) -> RunResult {
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

    for iter in 0..cfg.num_iters {
        let step =
            reinforce_step(model, fm, utility, &theta, cfg, iter, &mut trace.episode_returns);
        episodes += cfg.batch as u64;

        let next: Vec<f64> = theta
            .as_slice()
            .iter()
            .zip(&step.grad_est)
            .map(|(t, g)| t + cfg.step_size * g)
            .collect();
        let next = PolicyParams::new(next);

        trace.rows.push(TraceRow {
            iter,
            epoch: iter,
            inner: 0,
            episodes,
            samples: episodes * cfg.horizon as u64,
            grad_norm: norm(&step.grad_est),
            lambda_l1: step.lambda_est.iter().map(|v| v.abs()).sum(),
            step_norm: cfg.step_size * norm(&step.grad_est),
            trunc_hit: false,
            max_weight: step.max_weight,
            util_est: utility.value(&step.lambda_est),
            util_exact: cfg.track_exact.then(|| {
                let pol = policy::policy_matrix(fm, theta.as_slice());
                let lam = exact_occupancy(model, &pol, OccupancyMode::Infinite);
                utility.value(&lam.entries)
            }),
        });

        theta = next;
    }

    trace.wall_time = start.elapsed();
    RunResult { theta, trace }
}
