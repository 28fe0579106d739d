//! Benchmark environments.
//!
//! [`frozenlake8x8`] reproduces the classic slippery 8x8 FrozenLake grid:
//! the agent intends one of four moves but slides to each perpendicular
//! neighbour with probability 1/3, walls clamp movement, and holes and the
//! goal are absorbing with zero reward thereafter. The reward table stores
//! the expected immediate reward `r(s, a) = sum_s' P(s'|s,a) * 1{s' = goal}`,
//! so the first entry into the goal pays (in expectation) exactly as in the
//! episodic formulation.
//!
//! The tiny models ([`single_state`], [`two_state_switch`],
//! [`three_state_chain`]) are small enough for exhaustive trajectory
//! enumeration and serve as ground-truth fixtures for the estimator and
//! optimizer tests.

use crate::mdp::MdpModel;

const LAKE_MAP: [&str; 8] = [
    "SFFFFFFF", "FFFFFFFF", "FFFHFFFF", "FFFFFHFF", "FFFHFFFF", "FHHFFFHF", "FHFFHFHF", "FFFHFFFG",
];

const LEFT: usize = 0;
const DOWN: usize = 1;
const RIGHT: usize = 2;
const UP: usize = 3;

/// The slippery 8x8 FrozenLake grid at discount 0.99.
///
/// States are row-major cells (start at 0, goal at 63), actions are
/// left/down/right/up. With a tolerance-1e-10 value iteration the optimal
/// start-state value is 0.414640.
pub fn frozenlake8x8() -> MdpModel {
    let n = 8usize;
    let ns = n * n;
    let na = 4usize;
    let cell = |s: usize| LAKE_MAP[s / n].as_bytes()[s % n] as char;
    let step = |s: usize, a: usize| -> usize {
        let (mut r, mut c) = (s / n, s % n);
        match a {
            LEFT => c = c.saturating_sub(1),
            DOWN => r = (r + 1).min(n - 1),
            RIGHT => c = (c + 1).min(n - 1),
            UP => r = r.saturating_sub(1),
            _ => unreachable!("action out of range"),
        }
        r * n + c
    };

    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let idx = (s * na + a) * ns;
            if matches!(cell(s), 'H' | 'G') {
                transition[idx + s] = 1.0;
                continue;
            }
            // The intended move and both perpendicular slips, 1/3 each.
            for b in [(a + 3) % 4, a, (a + 1) % 4] {
                let s2 = step(s, b);
                transition[idx + s2] += 1.0 / 3.0;
                if cell(s2) == 'G' {
                    reward[s * na + a] += 1.0 / 3.0;
                }
            }
        }
    }
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    MdpModel::new(ns, na, transition, initial, 0.99, Some(reward))
        .expect("frozenlake tables are valid")
}

/// One state, one action, reward 1: the simplest possible sanity model.
/// Every value-style quantity is a pure geometric series.
pub fn single_state() -> MdpModel {
    MdpModel::new(1, 1, vec![1.0], vec![1.0], 0.9, Some(vec![1.0]))
        .expect("single-state tables are valid")
}

/// Two states, two actions: action 0 stays put, action 1 switches state.
/// Starts in state 0; reward 1 in state 1 under either action.
pub fn two_state_switch() -> MdpModel {
    let ns = 2;
    let na = 2;
    let mut transition = vec![0.0; ns * na * ns];
    for s in 0..ns {
        transition[(s * na) * ns + s] = 1.0; // stay
        transition[(s * na + 1) * ns + (1 - s)] = 1.0; // switch
    }
    let reward = vec![0.0, 0.0, 1.0, 1.0];
    MdpModel::new(ns, na, transition, vec![1.0, 0.0], 0.9, Some(reward))
        .expect("two-state tables are valid")
}

/// Three states in a line: action 0 stays, action 1 moves right (clamped at
/// the end). Starts at the left end; reward 1 in the final state.
pub fn three_state_chain() -> MdpModel {
    let ns = 3;
    let na = 2;
    let mut transition = vec![0.0; ns * na * ns];
    for s in 0..ns {
        transition[(s * na) * ns + s] = 1.0;
        transition[(s * na + 1) * ns + (s + 1).min(ns - 1)] = 1.0;
    }
    let mut reward = vec![0.0; ns * na];
    reward[2 * na] = 1.0;
    reward[2 * na + 1] = 1.0;
    MdpModel::new(ns, na, transition, vec![1.0, 0.0, 0.0], 0.9, Some(reward))
        .expect("three-state tables are valid")
}

/// Builds a tiny model by its config-file name.
pub fn by_name(name: &str) -> Option<MdpModel> {
    match name {
        "frozenlake8x8" => Some(frozenlake8x8()),
        "single_state" => Some(single_state()),
        "two_state_switch" => Some(two_state_switch()),
        "three_state_chain" => Some(three_state_chain()),
        _ => None,
    }
}
