//! Utilities of the occupancy measure and their smoothness metadata.
//!
//! A [`Utility`] is a smooth function `F(lambda)` of the unnormalized
//! occupancy vector together with three declared constants the optimizer's
//! step-size theory consumes:
//!
//! * `ell_lambda_inf` — bound on `|grad F(lambda)|_inf`,
//! * `L_lambda` — `|grad F(x) - grad F(y)|_inf <= L_lambda * |x - y|_2`,
//! * `L_lambda_inf` — the same with `|x - y|_1` on the right.
//!
//! The bounds are required to hold over the set of vectors the optimizer can
//! actually produce. Exact occupancies are nonnegative with L1 norm at most
//! `1 / (1 - gamma)`, but the recursive estimates are control-variate
//! combinations that can dip slightly below zero, so the entropy and
//! log-barrier utilities clamp their per-state aggregates at zero before
//! taking logs. This extends each `F` smoothly to the whole space while
//! keeping the declared bounds valid everywhere.

/// A smooth utility `F` of the occupancy vector.
pub trait Utility {
    /// `F(lambda)`.
    fn value(&self, lambda: &[f64]) -> f64;
    /// `grad F(lambda)`, in the same state-action layout as `lambda`.
    fn grad(&self, lambda: &[f64]) -> Vec<f64>;
    /// Whether `F` is concave (all shipped utilities are).
    fn is_concave(&self) -> bool;
    /// `ell_lambda_inf`: sup-norm bound on the gradient.
    fn grad_sup_bound(&self) -> f64;
    /// `L_lambda`: gradient Lipschitz constant, L2 norm on the argument.
    fn grad_lipschitz_l2(&self) -> f64;
    /// `L_lambda_inf`: gradient Lipschitz constant, L1 norm on the argument.
    fn grad_lipschitz_l1(&self) -> f64;
    fn name(&self) -> &'static str;
}

/// Expected cumulative reward: `F(lambda) = <r, lambda>`.
#[derive(Debug, Clone)]
pub struct LinearUtility {
    reward: Vec<f64>,
    sup: f64,
}

impl LinearUtility {
    pub fn new(reward: Vec<f64>) -> Self {
        assert!(!reward.is_empty(), "reward vector must be non-empty");
        assert!(reward.iter().all(|v| v.is_finite()), "reward must be finite");
        let sup = reward.iter().map(|v| v.abs()).fold(0.0, f64::max);
        Self { reward, sup }
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }
}

impl Utility for LinearUtility {
    fn value(&self, lambda: &[f64]) -> f64 {
        assert_eq!(lambda.len(), self.reward.len(), "dimension mismatch");
        lambda.iter().zip(&self.reward).map(|(a, b)| a * b).sum()
    }

    fn grad(&self, lambda: &[f64]) -> Vec<f64> {
        assert_eq!(lambda.len(), self.reward.len(), "dimension mismatch");
        self.reward.clone()
    }

    fn is_concave(&self) -> bool {
        true
    }

    fn grad_sup_bound(&self) -> f64 {
        self.sup
    }

    fn grad_lipschitz_l2(&self) -> f64 {
        0.0
    }

    fn grad_lipschitz_l1(&self) -> f64 {
        0.0
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}

/// Entropy of the normalized state visitation distribution
/// `mu(s) = (1 - gamma) * sum_a lambda(s, a)`:
///
/// ```text
/// F(lambda) = -sum_s mu(s) * log(mu(s) + floor)
/// ```
///
/// The additive `floor` (default `1e-8`) keeps the gradient bounded near
/// empty states; its magnitude sets the declared Lipschitz constants.
#[derive(Debug, Clone)]
pub struct EntropyUtility {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    floor: f64,
}

pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-8;

impl EntropyUtility {
    pub fn new(num_states: usize, num_actions: usize, discount: f64, floor: f64) -> Self {
        assert!(num_states > 0 && num_actions > 0);
        assert!(discount > 0.0 && discount < 1.0, "discount must lie in (0, 1)");
        assert!(floor > 0.0 && floor < 1.0, "entropy floor must lie in (0, 1)");
        Self { num_states, num_actions, discount, floor }
    }

    /// Clamped state marginals `mu(s)`.
    fn marginals(&self, lambda: &[f64]) -> Vec<f64> {
        assert_eq!(lambda.len(), self.num_states * self.num_actions, "dimension mismatch");
        (0..self.num_states)
            .map(|s| {
                let row = &lambda[s * self.num_actions..][..self.num_actions];
                ((1.0 - self.discount) * row.iter().sum::<f64>()).max(0.0)
            })
            .collect()
    }
}

impl Utility for EntropyUtility {
    fn value(&self, lambda: &[f64]) -> f64 {
        -self.marginals(lambda).iter().map(|&mu| mu * (mu + self.floor).ln()).sum::<f64>()
    }

    fn grad(&self, lambda: &[f64]) -> Vec<f64> {
        let mus = self.marginals(lambda);
        let mut out = vec![0.0; lambda.len()];
        for (s, &mu) in mus.iter().enumerate() {
            let g = -(1.0 - self.discount) * ((mu + self.floor).ln() + mu / (mu + self.floor));
            for a in 0..self.num_actions {
                out[s * self.num_actions + a] = g;
            }
        }
        out
    }

    fn is_concave(&self) -> bool {
        true
    }

    fn grad_sup_bound(&self) -> f64 {
        // |d/dmu| is largest at mu = 0 (|ln floor|) or mu = 1 (about 1); the
        // marginals of a valid occupancy never exceed 1.
        let at_zero = -self.floor.ln();
        let at_one = (1.0 + self.floor).ln() + 1.0 / (1.0 + self.floor);
        (1.0 - self.discount) * at_zero.max(at_one)
    }

    fn grad_lipschitz_l2(&self) -> f64 {
        let n = (self.num_states * self.num_actions) as f64;
        self.grad_lipschitz_l1() * n.sqrt()
    }

    fn grad_lipschitz_l1(&self) -> f64 {
        // |d2F/dmu2| <= 2 / floor and |mu - mu'| <= (1 - gamma) |dlambda|_1.
        2.0 * (1.0 - self.discount).powi(2) / self.floor
    }

    fn name(&self) -> &'static str {
        "entropy"
    }
}

/// Log-barrier bonus on state visitation:
/// `F(lambda) = sum_s log(sum_a lambda(s, a) + sigma)`.
///
/// Maximizing it drives the policy to visit every state; `sigma` bounds the
/// gradient by `1 / sigma`.
#[derive(Debug, Clone)]
pub struct LogBarrierUtility {
    num_states: usize,
    num_actions: usize,
    sigma: f64,
}

impl LogBarrierUtility {
    pub fn new(num_states: usize, num_actions: usize, sigma: f64) -> Self {
        assert!(num_states > 0 && num_actions > 0);
        assert!(sigma > 0.0, "log-barrier sigma must be positive");
        Self { num_states, num_actions, sigma }
    }

    fn row_sums(&self, lambda: &[f64]) -> Vec<f64> {
        assert_eq!(lambda.len(), self.num_states * self.num_actions, "dimension mismatch");
        (0..self.num_states)
            .map(|s| {
                lambda[s * self.num_actions..][..self.num_actions].iter().sum::<f64>().max(0.0)
            })
            .collect()
    }
}

impl Utility for LogBarrierUtility {
    fn value(&self, lambda: &[f64]) -> f64 {
        self.row_sums(lambda).iter().map(|&x| (x + self.sigma).ln()).sum()
    }

    fn grad(&self, lambda: &[f64]) -> Vec<f64> {
        let sums = self.row_sums(lambda);
        let mut out = vec![0.0; lambda.len()];
        for (s, &x) in sums.iter().enumerate() {
            let g = 1.0 / (x + self.sigma);
            for a in 0..self.num_actions {
                out[s * self.num_actions + a] = g;
            }
        }
        out
    }

    fn is_concave(&self) -> bool {
        true
    }

    fn grad_sup_bound(&self) -> f64 {
        1.0 / self.sigma
    }

    fn grad_lipschitz_l2(&self) -> f64 {
        (self.num_actions as f64).sqrt() / (self.sigma * self.sigma)
    }

    fn grad_lipschitz_l1(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }

    fn name(&self) -> &'static str {
        "log_barrier"
    }
}

/// A convex target set for [`SetDistanceUtility`].
#[derive(Debug, Clone)]
pub enum ConvexSet {
    /// Axis-aligned box `[lower, upper]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Euclidean ball around `center`.
    Ball { center: Vec<f64>, radius: f64 },
}

impl ConvexSet {
    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { center, .. } => center.len(),
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ConvexSet::Box { lower, upper } => {
                assert_eq!(u.len(), lower.len(), "dimension mismatch");
                u.iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
                    .collect()
            }
            ConvexSet::Ball { center, radius } => {
                assert_eq!(u.len(), center.len(), "dimension mismatch");
                let dist: f64 =
                    u.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if dist <= *radius {
                    u.to_vec()
                } else {
                    let scale = radius / dist;
                    u.iter().zip(center).map(|(a, b)| b + scale * (a - b)).collect()
                }
            }
        }
    }

    fn validate(&self) {
        match self {
            ConvexSet::Box { lower, upper } => {
                assert_eq!(lower.len(), upper.len(), "box bounds length mismatch");
                assert!(!lower.is_empty(), "box must be non-empty");
                assert!(
                    lower.iter().zip(upper).all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo <= hi),
                    "box bounds must be finite with lower <= upper"
                );
            }
            ConvexSet::Ball { center, radius } => {
                assert!(!center.is_empty(), "ball must be non-empty");
                assert!(center.iter().all(|v| v.is_finite()), "ball center must be finite");
                assert!(radius.is_finite() && *radius >= 0.0, "ball radius must be nonnegative");
            }
        }
    }
}

/// Negative squared distance of linear statistics to a convex target set:
///
/// ```text
/// F(lambda) = -min_{u in U} |u - M lambda|_2^2
/// ```
///
/// with gradient `2 M^T (Proj_U(M lambda) - M lambda)`. Maximizing it steers
/// the policy's feature expectations into `U` (an apprenticeship-style
/// objective).
#[derive(Debug, Clone)]
pub struct SetDistanceUtility {
    /// Row-major `k x n` statistics matrix.
    matrix: Vec<f64>,
    rows: usize,
    cols: usize,
    set: ConvexSet,
    sup: f64,
    lip_l2: f64,
    lip_l1: f64,
}

impl SetDistanceUtility {
    /// `matrix` is row-major `rows x cols`; `discount` bounds the reachable
    /// occupancy L1 ball and enters the declared gradient bound.
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>, set: ConvexSet, discount: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        assert_eq!(matrix.len(), rows * cols, "matrix length mismatch");
        assert!(matrix.iter().all(|v| v.is_finite()), "matrix must be finite");
        assert_eq!(set.dim(), rows, "set dimension must match matrix rows");
        assert!(discount > 0.0 && discount < 1.0, "discount must lie in (0, 1)");
        set.validate();

        let col_norm = |j: usize| -> f64 {
            (0..rows).map(|i| matrix[i * cols + j].powi(2)).sum::<f64>().sqrt()
        };
        let max_col = (0..cols).map(col_norm).fold(0.0, f64::max);
        let frob = matrix.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Over the reachable ball |lambda|_1 <= 1/(1-gamma), the distance to
        // the set is at most |M lambda| + dist(0, U).
        let proj0 = set.project(&vec![0.0; rows]);
        let dist0 = proj0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max_dist = max_col / (1.0 - discount) + dist0;
        Self {
            matrix,
            rows,
            cols,
            set,
            sup: 2.0 * max_col * max_dist,
            lip_l2: 4.0 * max_col * frob,
            lip_l1: 4.0 * max_col * max_col,
        }
    }

    fn apply(&self, lambda: &[f64]) -> Vec<f64> {
        assert_eq!(lambda.len(), self.cols, "dimension mismatch");
        (0..self.rows)
            .map(|i| {
                self.matrix[i * self.cols..][..self.cols]
                    .iter()
                    .zip(lambda)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

impl Utility for SetDistanceUtility {
    fn value(&self, lambda: &[f64]) -> f64 {
        let u = self.apply(lambda);
        let p = self.set.project(&u);
        -u.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn grad(&self, lambda: &[f64]) -> Vec<f64> {
        let u = self.apply(lambda);
        let p = self.set.project(&u);
        let v: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a - b).collect();
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = 2.0 * v[i];
            if vi == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(&self.matrix[i * self.cols..][..self.cols]) {
                *o += vi * m;
            }
        }
        out
    }

    fn is_concave(&self) -> bool {
        true
    }

    fn grad_sup_bound(&self) -> f64 {
        self.sup
    }

    fn grad_lipschitz_l2(&self) -> f64 {
        self.lip_l2
    }

    fn grad_lipschitz_l1(&self) -> f64 {
        self.lip_l1
    }

    fn name(&self) -> &'static str {
        "set_distance"
    }
}
