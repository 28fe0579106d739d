//! Softmax policies over pluggable feature maps.
//!
//! A policy is parameterized as
//!
//! ```text
//! pi_theta(a | s) = exp(psi(s, a; theta)) / sum_a' exp(psi(s, a'; theta))
//! ```
//!
//! where `psi` is a [`FeatureMap`] that declares two smoothness constants:
//! `ell_psi`, a bound on the gradient norm of `psi`, and `L_psi`, a bound on
//! its Hessian norm. The log-policy gradient is
//!
//! ```text
//! grad log pi(a | s) = grad psi(s, a) - sum_a' pi(a' | s) grad psi(s, a')
//! ```
//!
//! whose norm is at most `2 * ell_psi` — the quantity every importance-weight
//! and smoothness bound in the optimizer is built from. All softmax and
//! log-softmax evaluations are max-shifted, so arbitrarily large parameters
//! never overflow.

use crate::mdp::StochasticPolicy;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint feature-map kind mismatch: file has {found}, expected {expected}")]
    KindMismatch { found: String, expected: String },
    #[error("checkpoint dimension mismatch: file has {found}, expected {expected}")]
    DimMismatch { found: usize, expected: usize },
    #[error("parameter {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A differentiable score function `psi(s, a; theta)` with declared
/// smoothness constants.
pub trait FeatureMap {
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// `psi(s, a; theta)`.
    fn value(&self, state: usize, action: usize, theta: &[f64]) -> f64;
    /// Writes `grad_theta psi(s, a; theta)` into `out` (length `dim`).
    fn grad_into(&self, state: usize, action: usize, theta: &[f64], out: &mut [f64]);
    /// `ell_psi`: bound on `|grad psi|` over all states, actions, parameters.
    fn grad_norm_bound(&self) -> f64;
    /// `L_psi`: bound on the Hessian spectral norm (zero for linear maps).
    fn hessian_norm_bound(&self) -> f64;
    /// Short tag identifying the map in checkpoint headers.
    fn kind_tag(&self) -> String;
}

/// One independent parameter per state-action pair: `psi(s, a) = theta[s, a]`.
/// `ell_psi = 1`, `L_psi = 0`.
#[derive(Debug, Clone)]
pub struct TabularFeatures {
    num_states: usize,
    num_actions: usize,
}

impl TabularFeatures {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        assert!(num_states > 0 && num_actions > 0, "feature map must be non-empty");
        Self { num_states, num_actions }
    }
}

impl FeatureMap for TabularFeatures {
    fn dim(&self) -> usize {
        self.num_states * self.num_actions
    }

    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn value(&self, state: usize, action: usize, theta: &[f64]) -> f64 {
        theta[state * self.num_actions + action]
    }

    fn grad_into(&self, state: usize, action: usize, _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[state * self.num_actions + action] = 1.0;
    }

    fn grad_norm_bound(&self) -> f64 {
        1.0
    }

    fn hessian_norm_bound(&self) -> f64 {
        0.0
    }

    fn kind_tag(&self) -> String {
        format!("tabular:{}x{}", self.num_states, self.num_actions)
    }
}

/// Linear scores over fixed per-pair feature vectors:
/// `psi(s, a; theta) = <phi(s, a), theta>`. `ell_psi` is the largest feature
/// norm, `L_psi = 0`.
#[derive(Debug, Clone)]
pub struct LinearFeatures {
    num_states: usize,
    num_actions: usize,
    dim: usize,
    /// Row-major `phi(s, a)`, indexed by `(s * A + a) * dim + k`.
    features: Vec<f64>,
    max_row_norm: f64,
}

impl LinearFeatures {
    pub fn new(num_states: usize, num_actions: usize, dim: usize, features: Vec<f64>) -> Self {
        assert!(num_states > 0 && num_actions > 0 && dim > 0, "feature map must be non-empty");
        assert_eq!(features.len(), num_states * num_actions * dim, "feature table length");
        assert!(features.iter().all(|v| v.is_finite()), "features must be finite");
        let max_row_norm = (0..num_states * num_actions)
            .map(|i| features[i * dim..][..dim].iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Self { num_states, num_actions, dim, features, max_row_norm }
    }

    fn row(&self, state: usize, action: usize) -> &[f64] {
        &self.features[(state * self.num_actions + action) * self.dim..][..self.dim]
    }
}

impl FeatureMap for LinearFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn value(&self, state: usize, action: usize, theta: &[f64]) -> f64 {
        self.row(state, action).iter().zip(theta).map(|(a, b)| a * b).sum()
    }

    fn grad_into(&self, state: usize, action: usize, _theta: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.row(state, action));
    }

    fn grad_norm_bound(&self) -> f64 {
        self.max_row_norm
    }

    fn hessian_norm_bound(&self) -> f64 {
        0.0
    }

    fn kind_tag(&self) -> String {
        format!("linear:{}x{}:d{}", self.num_states, self.num_actions, self.dim)
    }
}

/// A flat, finite parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams(Vec<f64>);

impl PolicyParams {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(values.iter().all(|v| v.is_finite()), "policy parameters must be finite");
        Self(values)
    }

    /// The all-zero vector: the uniform softmax policy for any feature map
    /// with `psi` linear in `theta`.
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for PolicyParams {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

/// Writes max-shifted softmax probabilities for every action at `state` into
/// `out` (length `num_actions`).
pub fn action_probs_into<F: FeatureMap>(fm: &F, theta: &[f64], state: usize, out: &mut [f64]) {
    debug_assert_eq!(theta.len(), fm.dim(), "parameter dimension mismatch");
    debug_assert_eq!(out.len(), fm.num_actions());
    let mut max = f64::NEG_INFINITY;
    for (a, slot) in out.iter_mut().enumerate() {
        *slot = fm.value(state, a, theta);
        if *slot > max {
            max = *slot;
        }
    }
    let mut sum = 0.0;
    for slot in out.iter_mut() {
        *slot = (*slot - max).exp();
        sum += *slot;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
}

/// Writes max-shifted log-probabilities for every action at `state` into
/// `out`.
pub fn log_action_probs_into<F: FeatureMap>(fm: &F, theta: &[f64], state: usize, out: &mut [f64]) {
    debug_assert_eq!(theta.len(), fm.dim(), "parameter dimension mismatch");
    debug_assert_eq!(out.len(), fm.num_actions());
    let mut max = f64::NEG_INFINITY;
    for (a, slot) in out.iter_mut().enumerate() {
        *slot = fm.value(state, a, theta);
        if *slot > max {
            max = *slot;
        }
    }
    let lse = out.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for slot in out.iter_mut() {
        *slot -= lse;
    }
}

/// Allocating convenience wrapper around [`action_probs_into`].
pub fn action_probs<F: FeatureMap>(fm: &F, theta: &[f64], state: usize) -> Vec<f64> {
    let mut out = vec![0.0; fm.num_actions()];
    action_probs_into(fm, theta, state, &mut out);
    out
}

/// `log pi(action | state)`.
pub fn log_action_prob<F: FeatureMap>(fm: &F, theta: &[f64], state: usize, action: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut values = vec![0.0; fm.num_actions()];
    for (a, slot) in values.iter_mut().enumerate() {
        *slot = fm.value(state, a, theta);
        if *slot > max {
            max = *slot;
        }
    }
    let lse = values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    values[action] - lse
}

/// Reusable scratch space for log-policy-gradient evaluation.
#[derive(Debug, Clone)]
pub struct GradWorkspace {
    probs: Vec<f64>,
    grad: Vec<f64>,
}

impl GradWorkspace {
    pub fn new<F: FeatureMap>(fm: &F) -> Self {
        Self { probs: vec![0.0; fm.num_actions()], grad: vec![0.0; fm.dim()] }
    }
}

/// Writes `grad log pi_theta(action | state)` into `out`:
/// `grad psi(s, a) - sum_a' pi(a' | s) grad psi(s, a')`.
pub fn log_policy_grad_into<F: FeatureMap>(
    fm: &F,
    theta: &[f64],
    state: usize,
    action: usize,
    ws: &mut GradWorkspace,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), fm.dim());
    action_probs_into(fm, theta, state, &mut ws.probs);
    fm.grad_into(state, action, theta, out);
    for a in 0..fm.num_actions() {
        let p = ws.probs[a];
        if p == 0.0 {
            continue;
        }
        fm.grad_into(state, a, theta, &mut ws.grad);
        for (o, g) in out.iter_mut().zip(&ws.grad) {
            *o -= p * g;
        }
    }
}

/// Allocating convenience wrapper around [`log_policy_grad_into`].
pub fn log_policy_grad<F: FeatureMap>(
    fm: &F,
    theta: &[f64],
    state: usize,
    action: usize,
) -> Vec<f64> {
    let mut ws = GradWorkspace::new(fm);
    let mut out = vec![0.0; fm.dim()];
    log_policy_grad_into(fm, theta, state, action, &mut ws, &mut out);
    out
}

/// Adapter that lets a `(feature map, theta)` pair drive trajectory sampling.
pub struct SoftmaxPolicy<'a, F: FeatureMap> {
    fm: &'a F,
    theta: &'a [f64],
}

impl<'a, F: FeatureMap> SoftmaxPolicy<'a, F> {
    pub fn new(fm: &'a F, theta: &'a [f64]) -> Self {
        assert_eq!(theta.len(), fm.dim(), "parameter dimension mismatch");
        Self { fm, theta }
    }
}

impl<F: FeatureMap> StochasticPolicy for SoftmaxPolicy<'_, F> {
    fn num_actions(&self) -> usize {
        self.fm.num_actions()
    }

    fn action_probs_into(&self, state: usize, out: &mut [f64]) {
        action_probs_into(self.fm, self.theta, state, out);
    }
}

/// Dense policy table of the softmax policy at `theta`.
pub fn policy_matrix<F: FeatureMap>(fm: &F, theta: &[f64]) -> crate::mdp::PolicyMatrix {
    let (ns, na) = (fm.num_states(), fm.num_actions());
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        action_probs_into(fm, theta, s, &mut probs[s * na..s * na + na]);
    }
    crate::mdp::PolicyMatrix::new(ns, na, probs).expect("softmax rows are stochastic")
}

/// Saves parameters as a plain text checkpoint: a header recording the
/// feature-map kind and dimension, then one parameter per line. Lines
/// starting with `#` are comments and are ignored on load.
pub fn save_params<F: FeatureMap>(
    path: impl AsRef<Path>,
    fm: &F,
    params: &PolicyParams,
    comments: &[String],
) -> Result<(), PolicyError> {
    assert_eq!(params.len(), fm.dim(), "parameter dimension mismatch");
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for line in comments {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "kind {}", fm.kind_tag())?;
    writeln!(w, "dim {}", fm.dim())?;
    for v in params.as_slice() {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint written by [`save_params`], verifying that it belongs
/// to the given feature map.
pub fn load_params<F: FeatureMap>(
    path: impl AsRef<Path>,
    fm: &F,
) -> Result<PolicyParams, PolicyError> {
    let (kind, values) = read_checkpoint(path)?;
    if kind != fm.kind_tag() {
        return Err(PolicyError::KindMismatch { found: kind, expected: fm.kind_tag() });
    }
    if values.len() != fm.dim() {
        return Err(PolicyError::DimMismatch { found: values.len(), expected: fm.dim() });
    }
    Ok(PolicyParams::new(values))
}

/// Reads a checkpoint without validating it against a feature map; returns
/// the recorded kind tag and the raw parameter vector.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(String, Vec<f64>), PolicyError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut kind: Option<String> = None;
    let mut dim: Option<usize> = None;
    let mut values = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("kind ") {
            kind = Some(rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("dim ") {
            dim = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| PolicyError::Format(format!("bad dim line: {line}")))?,
            );
        } else {
            let v: f64 = line
                .parse()
                .map_err(|_| PolicyError::Format(format!("bad parameter line: {line}")))?;
            if !v.is_finite() {
                return Err(PolicyError::NonFinite { index: values.len() });
            }
            values.push(v);
        }
    }
    let kind = kind.ok_or_else(|| PolicyError::Format("missing kind header".into()))?;
    let dim = dim.ok_or_else(|| PolicyError::Format("missing dim header".into()))?;
    if values.len() != dim {
        return Err(PolicyError::Format(format!(
            "declared dim {dim} but found {} parameters",
            values.len()
        )));
    }
    Ok((kind, values))
}
