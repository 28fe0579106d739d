//! Tabular MDP models and the exact quantities defined on them.
//!
//! A [`MdpModel`] is a finite MDP `(S, A, P, xi, gamma)` with an optional
//! reward table. Terminal behaviour is expressed through absorbing states:
//! a state that self-loops under every action with zero reward. This keeps
//! every trajectory formally infinite, which is what the discounted occupancy
//! measure
//!
//! ```text
//! lambda(s, a) = sum_t gamma^t P(s_t = s, a_t = a)
//! ```
//!
//! is defined over; sampling always truncates at an explicit horizon.
//!
//! Besides sampling, the module computes exact occupancy measures (by direct
//! linear solve or by series summation), optimal values via value iteration,
//! and exact policy evaluation. These are the deterministic anchors the
//! stochastic estimators elsewhere in the crate are tested against.

use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

/// Problem-size bound below which the infinite-horizon occupancy measure is
/// computed by a dense linear solve; larger models fall back to summing the
/// geometric series to a `1e-12` tail.
const DIRECT_SOLVE_LIMIT: usize = 4096;

/// Absolute tail mass at which series summation of the occupancy stops.
const SERIES_TAIL: f64 = 1e-12;

/// Tolerance for "probabilities sum to one" checks on model construction.
const PROB_SUM_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("discount factor must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("state {state} action {action}: transition probabilities sum to {sum}, expected 1")]
    BadTransitionSum { state: usize, action: usize, sum: f64 },
    #[error("state {state} action {action}: negative or non-finite probability {value}")]
    BadProbability { state: usize, action: usize, value: f64 },
    #[error("initial distribution sums to {sum}, expected 1")]
    BadInitialDist { sum: f64 },
    #[error("initial distribution has negative or non-finite entry {value} at state {state}")]
    BadInitialEntry { state: usize, value: f64 },
    #[error("index out of range: state {state} (num_states {num_states})")]
    StateOutOfRange { state: usize, num_states: usize },
    #[error("index out of range: action {action} (num_actions {num_actions})")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("transition table: duplicate row for state {state} action {action}")]
    DuplicateRow { state: usize, action: usize },
    #[error("transition table: missing row for state {state} action {action}")]
    MissingRow { state: usize, action: usize },
    #[error("reward entry for state {state} action {action} is not finite")]
    BadReward { state: usize, action: usize },
    #[error("model has no reward table")]
    MissingReward,
    #[error("policy matrix: row {state} sums to {sum}, expected 1")]
    BadPolicyRow { state: usize, sum: f64 },
    #[error("failed to parse MDP file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A finite MDP with dense transition table and optional expected-reward
/// table `r(s, a)`.
#[derive(Debug, Clone)]
pub struct MdpModel {
    num_states: usize,
    num_actions: usize,
    /// Row-major `P(s' | s, a)`, indexed by `(s * A + a) * S + s'`.
    transition: Vec<f64>,
    /// Initial state distribution `xi`.
    initial_dist: Vec<f64>,
    /// Discount factor `gamma` in `(0, 1)`.
    discount: f64,
    /// Expected immediate reward `r(s, a)`, indexed by `s * A + a`.
    reward: Option<Vec<f64>>,
}

impl MdpModel {
    /// Builds and validates a model from dense tables.
    ///
    /// `transition` holds `P(s'|s,a)` indexed by `(s*A + a)*S + s'`; every
    /// `(s, a)` row must be a probability distribution up to `1e-8`.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
        reward: Option<Vec<f64>>,
    ) -> Result<Self, MdpError> {
        assert!(num_states > 0 && num_actions > 0, "model must be non-empty");
        assert_eq!(
            transition.len(),
            num_states * num_actions * num_states,
            "transition table has wrong length"
        );
        assert_eq!(initial_dist.len(), num_states, "initial distribution has wrong length");
        if let Some(r) = &reward {
            assert_eq!(r.len(), num_states * num_actions, "reward table has wrong length");
        }

        if !(discount > 0.0 && discount < 1.0) {
            return Err(MdpError::BadDiscount(discount));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = &transition[(s * num_actions + a) * num_states..][..num_states];
                let mut sum = 0.0;
                for &p in row {
                    if !p.is_finite() || p < 0.0 {
                        return Err(MdpError::BadProbability { state: s, action: a, value: p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(MdpError::BadTransitionSum { state: s, action: a, sum });
                }
            }
        }
        let mut sum = 0.0;
        for (s, &p) in initial_dist.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(MdpError::BadInitialEntry { state: s, value: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(MdpError::BadInitialDist { sum });
        }
        if let Some(r) = &reward {
            for s in 0..num_states {
                for a in 0..num_actions {
                    if !r[s * num_actions + a].is_finite() {
                        return Err(MdpError::BadReward { state: s, action: a });
                    }
                }
            }
        }

        Ok(Self { num_states, num_actions, transition, initial_dist, discount, reward })
    }

    /// Loads a model from a TOML file; see the crate README for the format.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, MdpError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Parses a model from TOML text.
    ///
    /// The format lists one `[[transition]]` row per `(state, action)` pair
    /// with its successor distribution, plus the initial distribution and
    /// discount; reward entries are optional and default to zero:
    ///
    /// ```toml
    /// num_states = 2
    /// num_actions = 2
    /// discount = 0.9
    /// initial_dist = [1.0, 0.0]
    ///
    /// [[transition]]
    /// state = 0
    /// action = 0
    /// next = [{ s = 0, p = 1.0 }]
    ///
    /// [[reward]]
    /// state = 0
    /// action = 0
    /// value = 1.0
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self, MdpError> {
        let file: MdpFile = toml::from_str(text).map_err(|e| MdpError::Parse(e.to_string()))?;
        let (ns, na) = (file.num_states, file.num_actions);
        if ns == 0 || na == 0 {
            return Err(MdpError::Parse("num_states and num_actions must be positive".into()));
        }
        let mut transition = vec![0.0; ns * na * ns];
        let mut seen = vec![false; ns * na];
        for row in &file.transition {
            if row.state >= ns {
                return Err(MdpError::StateOutOfRange { state: row.state, num_states: ns });
            }
            if row.action >= na {
                return Err(MdpError::ActionOutOfRange { action: row.action, num_actions: na });
            }
            let idx = row.state * na + row.action;
            if seen[idx] {
                return Err(MdpError::DuplicateRow { state: row.state, action: row.action });
            }
            seen[idx] = true;
            for next in &row.next {
                if next.s >= ns {
                    return Err(MdpError::StateOutOfRange { state: next.s, num_states: ns });
                }
                transition[idx * ns + next.s] += next.p;
            }
        }
        if let Some(idx) = seen.iter().position(|&b| !b) {
            return Err(MdpError::MissingRow { state: idx / na, action: idx % na });
        }
        let reward = match file.reward {
            None => None,
            Some(entries) => {
                let mut r = vec![0.0; ns * na];
                for e in &entries {
                    if e.state >= ns {
                        return Err(MdpError::StateOutOfRange { state: e.state, num_states: ns });
                    }
                    if e.action >= na {
                        return Err(MdpError::ActionOutOfRange { action: e.action, num_actions: na });
                    }
                    r[e.state * na + e.action] = e.value;
                }
                Some(r)
            }
        };
        Self::new(ns, na, transition, file.initial_dist, file.discount, reward)
    }

    /// Returns a copy of the model with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self, MdpError> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(MdpError::BadDiscount(discount));
        }
        let mut m = self.clone();
        m.discount = discount;
        Ok(m)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Expected-reward table `r(s, a)` indexed by `s * A + a`, if present.
    pub fn reward(&self) -> Option<&[f64]> {
        self.reward.as_deref()
    }

    pub fn reward_required(&self) -> Result<&[f64], MdpError> {
        self.reward.as_deref().ok_or(MdpError::MissingReward)
    }

    /// `P(s' | s, a)`.
    pub fn transition_prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.transition[(state * self.num_actions + action) * self.num_states + next]
    }

    /// Successor distribution for `(s, a)` as a slice of length `num_states`.
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        &self.transition[(state * self.num_actions + action) * self.num_states..][..self.num_states]
    }

    /// Flat index of the state-action pair, the layout all occupancy vectors
    /// and reward tables share.
    pub fn sa_index(&self, state: usize, action: usize) -> usize {
        debug_assert!(state < self.num_states && action < self.num_actions);
        state * self.num_actions + action
    }

    /// The uniform policy matrix on this model.
    pub fn uniform_policy(&self) -> PolicyMatrix {
        let p = 1.0 / self.num_actions as f64;
        PolicyMatrix::new(self.num_states, self.num_actions, vec![
            p;
            self.num_states
                * self.num_actions
        ])
        .expect("uniform policy is valid")
    }
}

#[derive(Deserialize)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    initial_dist: Vec<f64>,
    transition: Vec<TransitionRow>,
    reward: Option<Vec<RewardEntry>>,
}

#[derive(Deserialize)]
struct TransitionRow {
    state: usize,
    action: usize,
    next: Vec<NextEntry>,
}

#[derive(Deserialize)]
struct NextEntry {
    s: usize,
    p: f64,
}

#[derive(Deserialize)]
struct RewardEntry {
    state: usize,
    action: usize,
    value: f64,
}

/// Anything that can supply action distributions for sampling.
pub trait StochasticPolicy {
    fn num_actions(&self) -> usize;
    /// Writes `pi(. | state)` into `out`, which has length `num_actions`.
    fn action_probs_into(&self, state: usize, out: &mut [f64]);
}

/// A dense row-stochastic policy table `pi(a | s)`.
#[derive(Debug, Clone)]
pub struct PolicyMatrix {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyMatrix {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        assert_eq!(probs.len(), num_states * num_actions, "policy matrix has wrong length");
        for s in 0..num_states {
            let row = &probs[s * num_actions..][..num_actions];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) || (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(MdpError::BadPolicyRow { state: s, sum });
            }
        }
        Ok(Self { num_states, num_actions, probs })
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
}

impl StochasticPolicy for PolicyMatrix {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn action_probs_into(&self, state: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.probs[state * self.num_actions..][..self.num_actions]);
    }
}

/// A finite state-action path recorded during sampling.
///
/// `steps[t] = (s_t, a_t)`; the successor of the final step is never stored
/// because no estimator needs it. `seed_tag` identifies the RNG stream the
/// trajectory was drawn from, which makes every sample reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    pub seed_tag: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Draws one trajectory of exactly `horizon` steps.
///
/// The initial state follows the model's initial distribution; each step
/// samples an action from `policy` and a successor from the transition table,
/// consuming `2 * horizon + 1` uniform variates in a fixed order so that a
/// given RNG stream always reproduces the same trajectory.
pub fn sample_trajectory<P: StochasticPolicy, R: rand::Rng>(
    model: &MdpModel,
    policy: &P,
    horizon: usize,
    rng: &mut R,
    seed_tag: u64,
) -> Trajectory {
    assert_eq!(policy.num_actions(), model.num_actions, "policy/model action count mismatch");
    let mut probs = vec![0.0; model.num_actions];
    let mut steps = Vec::with_capacity(horizon);
    let mut state = sample_index(&model.initial_dist, rng);
    for _ in 0..horizon {
        policy.action_probs_into(state, &mut probs);
        let action = sample_index(&probs, rng);
        steps.push((state, action));
        state = sample_index(model.transition_row(state, action), rng);
    }
    Trajectory { steps, seed_tag }
}

/// Samples an index from an (approximately normalized) distribution using a
/// single uniform variate. Falls back to the last positive entry if rounding
/// leaves the cumulative sum marginally below the variate.
fn sample_index<R: rand::Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Which occupancy measure a vector represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupancyKind {
    /// Exact infinite-horizon measure.
    ExactInfinite,
    /// Exact horizon-truncated measure (first `H` steps).
    ExactTruncated(usize),
    /// A sampled estimate.
    Sampled,
}

/// Computation mode for [`exact_occupancy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupancyMode {
    Infinite,
    Truncated(usize),
}

/// A vector over state-action pairs in `sa_index` layout, tagged with the
/// kind of occupancy measure it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyVector {
    pub entries: Vec<f64>,
    pub kind: OccupancyKind,
}

impl OccupancyVector {
    pub fn zeros(len: usize, kind: OccupancyKind) -> Self {
        Self { entries: vec![0.0; len], kind }
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|v| v.abs()).sum()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        assert_eq!(self.entries.len(), other.len(), "dimension mismatch in dot product");
        self.entries.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

/// Exact discounted occupancy measure of `policy`.
///
/// Infinite mode solves `(I - gamma * P_pi^T) d = xi` for the state occupancy
/// `d` when the model is small enough (`|S||A| <= 4096`), otherwise it sums
/// the series until the remaining tail mass `gamma^(t+1) / (1 - gamma)` drops
/// below `1e-12`. Truncated mode sums exactly the first `H` terms. In both
/// cases `lambda(s, a) = d(s) * pi(a | s)`.
pub fn exact_occupancy(model: &MdpModel, policy: &PolicyMatrix, mode: OccupancyMode) -> OccupancyVector {
    assert_eq!(policy.num_states(), model.num_states, "policy/model state count mismatch");
    let (ns, na) = (model.num_states, model.num_actions);
    let gamma = model.discount;

    let state_occ: Vec<f64> = match mode {
        OccupancyMode::Infinite if ns * na <= DIRECT_SOLVE_LIMIT => {
            // M = I - gamma * P_pi^T, solve M d = xi.
            let m = nalgebra::DMatrix::from_fn(ns, ns, |i, j| {
                let p_ji: f64 =
                    (0..na).map(|a| policy.prob(j, a) * model.transition_prob(j, a, i)).sum();
                let ident = if i == j { 1.0 } else { 0.0 };
                ident - gamma * p_ji
            });
            let xi = nalgebra::DVector::from_column_slice(&model.initial_dist);
            let d = m.lu().solve(&xi).expect("I - gamma * P_pi is nonsingular for gamma < 1");
            d.iter().copied().collect()
        }
        OccupancyMode::Infinite => {
            let mut occ = vec![0.0; ns];
            let mut p_t = model.initial_dist.to_vec();
            let mut next = vec![0.0; ns];
            let mut disc = 1.0;
            loop {
                for s in 0..ns {
                    occ[s] += disc * p_t[s];
                }
                disc *= gamma;
                // Remaining mass of the series is disc / (1 - gamma).
                if disc / (1.0 - gamma) < SERIES_TAIL {
                    break;
                }
                propagate(model, policy, &p_t, &mut next);
                std::mem::swap(&mut p_t, &mut next);
            }
            occ
        }
        OccupancyMode::Truncated(h) => {
            let mut occ = vec![0.0; ns];
            let mut p_t = model.initial_dist.to_vec();
            let mut next = vec![0.0; ns];
            let mut disc = 1.0;
            for t in 0..h {
                for s in 0..ns {
                    occ[s] += disc * p_t[s];
                }
                disc *= gamma;
                if t + 1 < h {
                    propagate(model, policy, &p_t, &mut next);
                    std::mem::swap(&mut p_t, &mut next);
                }
            }
            occ
        }
    };

    let mut entries = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            entries[s * na + a] = state_occ[s] * policy.prob(s, a);
        }
    }
    let kind = match mode {
        OccupancyMode::Infinite => OccupancyKind::ExactInfinite,
        OccupancyMode::Truncated(h) => OccupancyKind::ExactTruncated(h),
    };
    OccupancyVector { entries, kind }
}

/// One step of the state-distribution flow: `next = P_pi^T p`.
fn propagate(model: &MdpModel, policy: &PolicyMatrix, p: &[f64], next: &mut [f64]) {
    next.iter_mut().for_each(|v| *v = 0.0);
    for s in 0..model.num_states {
        if p[s] == 0.0 {
            continue;
        }
        for a in 0..model.num_actions {
            let w = p[s] * policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            let row = model.transition_row(s, a);
            for (s2, &pr) in row.iter().enumerate() {
                if pr > 0.0 {
                    next[s2] += w * pr;
                }
            }
        }
    }
}

/// Value iteration for the optimal discounted value function.
///
/// Iterates the Bellman optimality operator until the sup-norm change drops
/// below `tol * (1 - gamma) / gamma`, which guarantees the returned `V` is
/// within `tol` of `V*` in sup norm. Returns `(V, <xi, V>)`.
pub fn value_iteration(model: &MdpModel, tol: f64) -> Result<(Vec<f64>, f64), MdpError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let reward = model.reward_required()?;
    let (ns, na) = (model.num_states, model.num_actions);
    let gamma = model.discount;
    let stop = tol * (1.0 - gamma) / gamma;

    let mut v = vec![0.0; ns];
    let mut v_next = vec![0.0; ns];
    loop {
        let mut change: f64 = 0.0;
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let row = model.transition_row(s, a);
                let mut q = reward[s * na + a];
                let mut ev = 0.0;
                for (s2, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        ev += p * v[s2];
                    }
                }
                q += gamma * ev;
                if q > best {
                    best = q;
                }
            }
            v_next[s] = best;
            change = change.max((best - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut v_next);
        if change < stop {
            break;
        }
    }
    let start_value = v.iter().zip(&model.initial_dist).map(|(a, b)| a * b).sum();
    Ok((v, start_value))
}

/// Exact policy evaluation: solves `(I - gamma * P_pi) V = r_pi` and returns
/// `(V, <xi, V>)`.
pub fn policy_evaluation(model: &MdpModel, policy: &PolicyMatrix) -> Result<(Vec<f64>, f64), MdpError> {
    let reward = model.reward_required()?;
    let (ns, na) = (model.num_states, model.num_actions);
    let gamma = model.discount;

    let m = nalgebra::DMatrix::from_fn(ns, ns, |i, j| {
        let p_ij: f64 = (0..na).map(|a| policy.prob(i, a) * model.transition_prob(i, a, j)).sum();
        let ident = if i == j { 1.0 } else { 0.0 };
        ident - gamma * p_ij
    });
    let r_pi = nalgebra::DVector::from_fn(ns, |s, _| {
        (0..na).map(|a| policy.prob(s, a) * reward[s * na + a]).sum()
    });
    let v = m.lu().solve(&r_pi).expect("I - gamma * P_pi is nonsingular for gamma < 1");
    let start_value = v.iter().zip(&model.initial_dist).map(|(a, b)| a * b).sum();
    Ok((v.iter().copied().collect(), start_value))
}

/// Discounted return `sum_t gamma^t r(s_t, a_t)` of a recorded trajectory.
pub fn discounted_return(traj: &Trajectory, reward: &[f64], num_actions: usize, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for &(s, a) in &traj.steps {
        total += disc * reward[s * num_actions + a];
        disc *= gamma;
    }
    total
}

/// Undiscounted return `sum_t r(s_t, a_t)` of a recorded trajectory.
pub fn undiscounted_return(traj: &Trajectory, reward: &[f64], num_actions: usize) -> f64 {
    traj.steps.iter().map(|&(s, a)| reward[s * num_actions + a]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn always(action: usize, ns: usize, na: usize) -> PolicyMatrix {
        let mut probs = vec![0.0; ns * na];
        for s in 0..ns {
            probs[s * na + action] = 1.0;
        }
        PolicyMatrix::new(ns, na, probs).unwrap()
    }

    #[test]
    fn rejects_bad_transition_sum() {
        let err = MdpModel::new(1, 1, vec![0.5], vec![1.0], 0.9, None).unwrap_err();
        assert!(matches!(err, MdpError::BadTransitionSum { .. }), "got {err:?}");
    }

    #[test]
    fn rejects_bad_discount() {
        let err = MdpModel::new(1, 1, vec![1.0], vec![1.0], 1.0, None).unwrap_err();
        assert!(matches!(err, MdpError::BadDiscount(_)));
    }

    #[test]
    fn two_state_switch_occupancy_matches_hand_series() {
        // Always flipping visits states 0, 1, 0, 1, ... so
        // lambda(0, 1) = 1 / (1 - g^2) and lambda(1, 1) = g / (1 - g^2).
        let model = envs::two_state_switch().with_discount(0.5).unwrap();
        let pi = always(1, 2, 2);
        let occ = exact_occupancy(&model, &pi, OccupancyMode::Infinite);
        let g = 0.5;
        assert!((occ.entries[model.sa_index(0, 1)] - 1.0 / (1.0 - g * g)).abs() < 1e-12);
        assert!((occ.entries[model.sa_index(1, 1)] - g / (1.0 - g * g)).abs() < 1e-12);
        assert!(occ.entries[model.sa_index(0, 0)].abs() < 1e-15);
        assert!((occ.l1_norm() - 1.0 / (1.0 - g)).abs() < 1e-12);
    }

    #[test]
    fn three_state_chain_occupancy_matches_hand_series() {
        // Always stepping right: state t = min(t, 2), so lambda(0,1) = 1,
        // lambda(1,1) = g, lambda(2,1) = g^2 / (1 - g).
        let model = envs::three_state_chain().with_discount(0.5).unwrap();
        let pi = always(1, 3, 2);
        let occ = exact_occupancy(&model, &pi, OccupancyMode::Infinite);
        let g = 0.5;
        assert!((occ.entries[model.sa_index(0, 1)] - 1.0).abs() < 1e-12);
        assert!((occ.entries[model.sa_index(1, 1)] - g).abs() < 1e-12);
        assert!((occ.entries[model.sa_index(2, 1)] - g * g / (1.0 - g)).abs() < 1e-12);
    }

    #[test]
    fn series_summation_agrees_with_linear_solve() {
        let model = envs::frozenlake8x8();
        let pi = model.uniform_policy();
        let solved = exact_occupancy(&model, &pi, OccupancyMode::Infinite);

        // Force the series path by summing manually to the same tail bound.
        let mut series = vec![0.0; 64];
        let mut p = model.initial_dist().to_vec();
        let mut next = vec![0.0; 64];
        let mut disc = 1.0;
        loop {
            for s in 0..64 {
                series[s] += disc * p[s];
            }
            disc *= model.discount();
            if disc / (1.0 - model.discount()) < 1e-14 {
                break;
            }
            propagate(&model, &pi, &p, &mut next);
            std::mem::swap(&mut p, &mut next);
        }
        for s in 0..64 {
            for a in 0..4 {
                let lam = series[s] * pi.prob(s, a);
                assert!(
                    (lam - solved.entries[s * 4 + a]).abs() < 1e-10,
                    "state {s} action {a}: series {lam} vs solve {}",
                    solved.entries[s * 4 + a]
                );
            }
        }
    }

    #[test]
    fn truncated_occupancy_converges_to_infinite() {
        let model = envs::two_state_switch().with_discount(0.8).unwrap();
        let pi = model.uniform_policy();
        let inf = exact_occupancy(&model, &pi, OccupancyMode::Infinite);
        let mut prev_err = f64::INFINITY;
        for h in [5, 20, 80, 320] {
            let tr = exact_occupancy(&model, &pi, OccupancyMode::Truncated(h));
            let err: f64 = tr
                .entries
                .iter()
                .zip(&inf.entries)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < prev_err || err == 0.0, "H {h}: error {err} did not shrink");
            // Tail of the truncated series is bounded by gamma^H / (1 - gamma).
            assert!(err <= 0.8f64.powi(h as i32) / 0.2 + 1e-12);
            prev_err = err;
        }
    }

    #[test]
    fn truncated_l1_norm_matches_geometric_sum() {
        let model = envs::three_state_chain().with_discount(0.7).unwrap();
        let pi = model.uniform_policy();
        let h = 13;
        let occ = exact_occupancy(&model, &pi, OccupancyMode::Truncated(h));
        let expect = (1.0 - 0.7f64.powi(h as i32)) / (1.0 - 0.7);
        assert!((occ.l1_norm() - expect).abs() < 1e-12);
        assert_eq!(occ.kind, OccupancyKind::ExactTruncated(h));
    }

    #[test]
    fn occupancy_dot_reward_equals_policy_evaluation() {
        let model = envs::frozenlake8x8();
        let pi = model.uniform_policy();
        let occ = exact_occupancy(&model, &pi, OccupancyMode::Infinite);
        let (_, v0) = policy_evaluation(&model, &pi).unwrap();
        let lam_r = occ.dot(model.reward().unwrap());
        assert!((lam_r - v0).abs() < 1e-8, "lambda . r = {lam_r}, policy eval = {v0}");
    }

    #[test]
    fn value_iteration_frozenlake_anchor() {
        // Independently recomputed with an external value-iteration script.
        let model = envs::frozenlake8x8();
        let (_, v0) = value_iteration(&model, 1e-10).unwrap();
        assert!((v0 - 0.41464036179872477).abs() < 1e-9, "V*(start) = {v0}");
    }

    #[test]
    fn value_iteration_single_state_geometric() {
        let model = envs::single_state().with_discount(0.9).unwrap();
        let (v, v0) = value_iteration(&model, 1e-12).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-10);
        assert!((v0 - 10.0).abs() < 1e-10);
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let model = envs::frozenlake8x8();
        let pi = model.uniform_policy();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        r1.set_stream(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        r2.set_stream(3);
        let t1 = sample_trajectory(&model, &pi, 40, &mut r1, 3);
        let t2 = sample_trajectory(&model, &pi, 40, &mut r2, 3);
        assert_eq!(t1, t2);
        let mut r3 = ChaCha8Rng::seed_from_u64(7);
        r3.set_stream(4);
        let t3 = sample_trajectory(&model, &pi, 40, &mut r3, 4);
        assert_ne!(t1.steps, t3.steps, "different streams should differ");
    }

    #[test]
    fn sampled_states_follow_model_support() {
        let model = envs::two_state_switch();
        let pi = model.uniform_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for tag in 0..50 {
            let traj = sample_trajectory(&model, &pi, 17, &mut rng, tag);
            assert_eq!(traj.horizon(), 17);
            for &(s, a) in &traj.steps {
                assert!(s < 2 && a < 2);
            }
        }
    }

    #[test]
    fn empirical_state_frequencies_match_transition_row() {
        // Frequency check on the slippery FrozenLake start state.
        let model = envs::frozenlake8x8();
        let pi = always(2, 64, 4); // always RIGHT
        let mut counts = vec![0usize; 64];
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for tag in 0..n {
            let traj = sample_trajectory(&model, &pi, 2, &mut rng, tag as u64);
            counts[traj.steps[1].0] += 1;
        }
        for s2 in 0..64 {
            let p = model.transition_prob(0, 2, s2);
            let freq = counts[s2] as f64 / n as f64;
            assert!((freq - p).abs() < 5e-3, "state {s2}: freq {freq} vs p {p}");
        }
    }

    #[test]
    fn mdp_file_roundtrip() {
        let text = r#"
num_states = 2
num_actions = 2
discount = 0.9
initial_dist = [1.0, 0.0]

[[transition]]
state = 0
action = 0
next = [{ s = 0, p = 1.0 }]

[[transition]]
state = 0
action = 1
next = [{ s = 1, p = 1.0 }]

[[transition]]
state = 1
action = 0
next = [{ s = 1, p = 1.0 }]

[[transition]]
state = 1
action = 1
next = [{ s = 0, p = 0.25 }, { s = 1, p = 0.75 }]

[[reward]]
state = 1
action = 0
value = 1.0
"#;
        let model = MdpModel::from_toml_str(text).unwrap();
        assert_eq!(model.num_states(), 2);
        assert!((model.transition_prob(1, 1, 0) - 0.25).abs() < 1e-15);
        assert!((model.reward().unwrap()[model.sa_index(1, 0)] - 1.0).abs() < 1e-15);
        assert!((model.reward().unwrap()[model.sa_index(0, 1)]).abs() < 1e-15);
    }

    #[test]
    fn mdp_file_missing_row_is_rejected() {
        let text = r#"
num_states = 2
num_actions = 1
discount = 0.9
initial_dist = [1.0, 0.0]

[[transition]]
state = 0
action = 0
next = [{ s = 1, p = 1.0 }]
"#;
        let err = MdpModel::from_toml_str(text).unwrap_err();
        assert!(matches!(err, MdpError::MissingRow { state: 1, action: 0 }), "got {err:?}");
    }

    #[test]
    fn mdp_file_bad_probability_is_rejected() {
        let text = r#"
num_states = 1
num_actions = 1
discount = 0.9
initial_dist = [1.0]

[[transition]]
state = 0
action = 0
next = [{ s = 0, p = 0.9 }]
"#;
        let err = MdpModel::from_toml_str(text).unwrap_err();
        assert!(matches!(err, MdpError::BadTransitionSum { .. }), "got {err:?}");
    }
}
