//! Exact dynamic programming on known MDPs: policy evaluation, optimal
//! control and forward occupancy recursion.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{EpisodicMdp, InitDist, OccupancyTables, Policy};

/// Per-step value tables. `v` has `H + 1` rows with `v[H] = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub v: Array2<f64>,
    pub q: Array3<f64>,
}

impl ValueTables {
    pub fn initial_value(&self, xi: &InitDist) -> f64 {
        xi.expect(self.v.row(0).iter().copied())
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn policy_values(mdp: &EpisodicMdp, policy: &Policy) -> Result<ValueTables> {
    let d = mdp.dims();
    let probs = policy.check_shape(d)?;
    let mut v = Array2::zeros((d.horizon + 1, d.states));
    let mut q = Array3::zeros((d.horizon, d.states, d.actions));
    for h in (0..d.horizon).rev() {
        let next = v.row(h + 1).to_vec();
        for s in 0..d.states {
            let mut acc = 0.0;
            for a in 0..d.actions {
                let qa = mdp.reward(h, s, a) + mdp.expected_next(h, s, a, &next);
                q[[h, s, a]] = qa;
                acc += probs[[h, s, a]] * qa;
            }
            v[[h, s]] = acc;
        }
    }
    Ok(ValueTables { v, q })
}

/// `V^π_1(ξ)` by backward induction.
pub fn evaluate_policy(mdp: &EpisodicMdp, policy: &Policy, xi: &InitDist) -> Result<f64> {
    check_init(mdp, xi)?;
    Ok(policy_values(mdp, policy)?.initial_value(xi))
}

/// Greedy backward induction; ties go to the lowest action index.
pub fn optimal_policy(mdp: &EpisodicMdp) -> (Policy, ValueTables) {
    let d = mdp.dims();
    let mut v = Array2::zeros((d.horizon + 1, d.states));
    let mut q = Array3::zeros((d.horizon, d.states, d.actions));
    let mut actions = Array2::zeros((d.horizon, d.states));
    for h in (0..d.horizon).rev() {
        let next = v.row(h + 1).to_vec();
        for s in 0..d.states {
            for a in 0..d.actions {
                q[[h, s, a]] = mdp.reward(h, s, a) + mdp.expected_next(h, s, a, &next);
            }
            let best = argmax(q.slice(s![h, s, ..]).iter().copied());
            actions[[h, s]] = best;
            v[[h, s]] = q[[h, s, best]];
        }
    }
    (Policy::deterministic(actions), ValueTables { v, q })
}

/// Forward recursion `d_0 = ξ`, `d_{h+1}(s') = Σ_{s,a} d_h(s,a) P_h(s'|s,a)`.
pub fn occupancy(mdp: &EpisodicMdp, policy: &Policy, xi: &InitDist) -> Result<OccupancyTables> {
    let d = mdp.dims();
    check_init(mdp, xi)?;
    let probs = policy.check_shape(d)?;
    let mut state = Array2::zeros((d.horizon, d.states));
    let mut state_action = Array3::zeros((d.horizon, d.states, d.actions));
    state.row_mut(0).assign(xi.probs());
    for h in 0..d.horizon {
        for s in 0..d.states {
            for a in 0..d.actions {
                state_action[[h, s, a]] = state[[h, s]] * probs[[h, s, a]];
            }
        }
        if h + 1 < d.horizon {
            for s in 0..d.states {
                for a in 0..d.actions {
                    let mass = state_action[[h, s, a]];
                    if mass == 0.0 {
                        continue;
                    }
                    for next in 0..d.states {
                        state[[h + 1, next]] += mass * mdp.transition(h, s, a, next);
                    }
                }
            }
        }
    }
    Ok(OccupancyTables { state, state_action })
}

pub(crate) fn check_init(mdp: &EpisodicMdp, xi: &InitDist) -> Result<()> {
    if xi.len() != mdp.num_states() {
        return Err(crate::Error::shape(format!(
            "initial distribution over {} states, instance has {}",
            xi.len(),
            mdp.num_states()
        )));
    }
    Ok(())
}
