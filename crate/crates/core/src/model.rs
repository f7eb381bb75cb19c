//! Tabular problem instances: episodic MDPs, two-player zero-sum Markov
//! games, KL-robust MDPs, policies and initial-state distributions.
//!
//! Steps are zero-based throughout: a horizon-`H` instance has steps
//! `0..H`, and value tables carry an extra terminal row `H` that is
//! identically zero.

use ndarray::{Array1, Array2, Array3, Array4, Array5, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for transition rows, policy rows and initial
/// distributions.
pub const PROB_TOL: f64 = 1e-9;

/// Probabilities below this are treated as structural zeros when deciding
/// the support of a distribution.
pub const SUPPORT_FLOOR: f64 = 1e-15;

fn check_distribution(row: impl IntoIterator<Item = f64>, what: impl Fn() -> String) -> Result<()> {
    let mut sum = 0.0;
    for p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::input(format!("{}: entry {p} is not a probability", what())));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::input(format!("{}: sums to {sum}, expected 1", what())));
    }
    Ok(())
}

/// Finite-horizon MDP with deterministic rewards in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodicMdp {
    transitions: Array4<f64>,
    rewards: Array3<f64>,
}

impl EpisodicMdp {
    /// `transitions` is indexed `(h, s, a, s')`, `rewards` `(h, s, a)`.
    pub fn new(transitions: Array4<f64>, rewards: Array3<f64>) -> Result<Self> {
        let (h, s, a, s2) = transitions.dim();
        if h == 0 || s == 0 || a == 0 {
            return Err(Error::shape("horizon, states and actions must all be positive"));
        }
        if s2 != s {
            return Err(Error::shape(format!("transition tensor has {s} states but {s2} next states")));
        }
        if rewards.dim() != (h, s, a) {
            return Err(Error::shape(format!(
                "reward table is {:?}, expected {:?}",
                rewards.dim(),
                (h, s, a)
            )));
        }
        for ((step, state, action), row) in transitions
            .lanes(Axis(3))
            .into_iter()
            .enumerate()
            .map(|(i, row)| ((i / (s * a), (i / a) % s, i % a), row))
        {
            check_distribution(row.iter().copied(), || {
                format!("transition row (h={step}, s={state}, a={action})")
            })?;
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::input(format!("reward {r} outside [0, 1]")));
        }
        Ok(Self { transitions, rewards })
    }

    pub fn horizon(&self) -> usize {
        self.transitions.dim().0
    }

    pub fn num_states(&self) -> usize {
        self.transitions.dim().1
    }

    pub fn num_actions(&self) -> usize {
        self.transitions.dim().2
    }

    pub fn transitions(&self) -> &Array4<f64> {
        &self.transitions
    }

    pub fn rewards(&self) -> &Array3<f64> {
        &self.rewards
    }

    pub fn transition(&self, h: usize, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[[h, s, a, next]]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[[h, s, a]]
    }

    pub fn dims(&self) -> Dims {
        Dims {
            horizon: self.horizon(),
            states: self.num_states(),
            actions: self.num_actions(),
        }
    }

    /// Expected next-step value `Σ_{s'} P_h(s'|s,a) v(s')`.
    pub fn expected_next(&self, h: usize, s: usize, a: usize, next_values: &[f64]) -> f64 {
        self.transitions
            .slice(ndarray::s![h, s, a, ..])
            .iter()
            .zip(next_values)
            .map(|(p, v)| p * v)
            .sum()
    }
}

/// `(H, S, A)` of a tabular instance; `actions` is the joint count for games.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub horizon: usize,
    pub states: usize,
    pub actions: usize,
}

impl Dims {
    pub fn num_tuples(&self) -> usize {
        self.horizon * self.states * self.actions
    }
}

/// Two-player zero-sum Markov game. The max-player picks `a1 < A1`, the
/// min-player `a2 < A2`; joint actions flatten to `a1 * A2 + a2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroSumGame {
    transitions: Array5<f64>,
    rewards: Array4<f64>,
}

impl ZeroSumGame {
    /// `transitions` is indexed `(h, s, a1, a2, s')`, `rewards` `(h, s, a1, a2)`.
    pub fn new(transitions: Array5<f64>, rewards: Array4<f64>) -> Result<Self> {
        let (h, s, a1, a2, s2) = transitions.dim();
        if s2 != s {
            return Err(Error::shape("game transition tensor next-state axis does not match states"));
        }
        if rewards.dim() != (h, s, a1, a2) {
            return Err(Error::shape("game reward table does not match transition tensor"));
        }
        let game = Self { transitions, rewards };
        // validates rows and rewards
        game.joint_mdp()?;
        Ok(game)
    }

    pub fn from_joint(mdp: &EpisodicMdp, max_actions: usize, min_actions: usize) -> Result<Self> {
        let d = mdp.dims();
        if max_actions * min_actions != d.actions || max_actions == 0 {
            return Err(Error::shape(format!(
                "joint action count {} is not {max_actions}x{min_actions}",
                d.actions
            )));
        }
        let transitions = mdp
            .transitions()
            .to_owned()
            .into_shape_with_order((d.horizon, d.states, max_actions, min_actions, d.states))
            .map_err(|e| Error::shape(e.to_string()))?;
        let rewards = mdp
            .rewards()
            .to_owned()
            .into_shape_with_order((d.horizon, d.states, max_actions, min_actions))
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Self { transitions, rewards })
    }

    pub fn horizon(&self) -> usize {
        self.transitions.dim().0
    }

    pub fn num_states(&self) -> usize {
        self.transitions.dim().1
    }

    pub fn max_actions(&self) -> usize {
        self.transitions.dim().2
    }

    pub fn min_actions(&self) -> usize {
        self.transitions.dim().3
    }

    pub fn transitions(&self) -> &Array5<f64> {
        &self.transitions
    }

    pub fn rewards(&self) -> &Array4<f64> {
        &self.rewards
    }

    pub fn joint_action(&self, a1: usize, a2: usize) -> usize {
        a1 * self.min_actions() + a2
    }

    /// The game viewed as an MDP over flattened joint actions.
    pub fn joint_mdp(&self) -> Result<EpisodicMdp> {
        let (h, s, a1, a2, _) = self.transitions.dim();
        let transitions = self
            .transitions
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((h, s, a1 * a2, s))
            .map_err(|e| Error::shape(e.to_string()))?;
        let rewards = self
            .rewards
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((h, s, a1 * a2))
            .map_err(|e| Error::shape(e.to_string()))?;
        EpisodicMdp::new(transitions, rewards)
    }
}

/// Nominal MDP plus KL radius of the per-`(s, a, h)` rectangular
/// uncertainty set.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustSpec {
    nominal: EpisodicMdp,
    sigma: f64,
}

impl RobustSpec {
    pub fn new(nominal: EpisodicMdp, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", format!("KL radius must be positive, got {sigma}")));
        }
        Ok(Self { nominal, sigma })
    }

    pub fn nominal(&self) -> &EpisodicMdp {
        &self.nominal
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Action index per `(h, s)`.
    Deterministic { actions: Array2<usize> },
    /// `π_h(a|s)` indexed `(h, s, a)`.
    Mixed { probs: Array3<f64> },
    /// Independent max-player and min-player mixed policies of a game.
    Product { max: Array3<f64>, min: Array3<f64> },
}

impl Policy {
    pub fn deterministic(actions: Array2<usize>) -> Self {
        Policy::Deterministic { actions }
    }

    pub fn mixed(probs: Array3<f64>) -> Result<Self> {
        validate_mixed(&probs)?;
        Ok(Policy::Mixed { probs })
    }

    pub fn product(max: Array3<f64>, min: Array3<f64>) -> Result<Self> {
        validate_mixed(&max)?;
        validate_mixed(&min)?;
        let (h1, s1, _) = max.dim();
        let (h2, s2, _) = min.dim();
        if (h1, s1) != (h2, s2) {
            return Err(Error::shape("product policy halves disagree on (H, S)"));
        }
        Ok(Policy::Product { max, min })
    }

    /// Uniform distribution over actions at every `(h, s)`.
    pub fn uniform(horizon: usize, states: usize, actions: usize) -> Self {
        Policy::Mixed {
            probs: Array3::from_elem((horizon, states, actions), 1.0 / actions as f64),
        }
    }

    /// Same action at every `(h, s)`.
    pub fn constant(horizon: usize, states: usize, action: usize) -> Self {
        Policy::Deterministic {
            actions: Array2::from_elem((horizon, states), action),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Policy::Deterministic { actions } => actions.dim().0,
            Policy::Mixed { probs } => probs.dim().0,
            Policy::Product { max, .. } => max.dim().0,
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            Policy::Deterministic { actions } => actions.dim().1,
            Policy::Mixed { probs } => probs.dim().1,
            Policy::Product { max, .. } => max.dim().1,
        }
    }

    /// Action chosen at `(h, s)` by a deterministic policy.
    pub fn action(&self, h: usize, s: usize) -> Option<usize> {
        match self {
            Policy::Deterministic { actions } => Some(actions[[h, s]]),
            _ => None,
        }
    }

    /// Dense `(h, s, a)` probability table over `num_actions` (joint) actions.
    /// Product policies expand to `μ(a1|s)·ν(a2|s)` at index `a1 * A2 + a2`.
    pub fn probabilities(&self, num_actions: usize) -> Result<Array3<f64>> {
        match self {
            Policy::Deterministic { actions } => {
                let (h, s) = actions.dim();
                let mut probs = Array3::zeros((h, s, num_actions));
                for ((hh, ss), &a) in actions.indexed_iter() {
                    if a >= num_actions {
                        return Err(Error::shape(format!(
                            "policy picks action {a} at (h={hh}, s={ss}) but only {num_actions} exist"
                        )));
                    }
                    probs[[hh, ss, a]] = 1.0;
                }
                Ok(probs)
            }
            Policy::Mixed { probs } => {
                if probs.dim().2 != num_actions {
                    return Err(Error::shape(format!(
                        "policy covers {} actions, instance has {num_actions}",
                        probs.dim().2
                    )));
                }
                Ok(probs.clone())
            }
            Policy::Product { max, min } => {
                let (h, s, a1) = max.dim();
                let a2 = min.dim().2;
                if a1 * a2 != num_actions {
                    return Err(Error::shape(format!(
                        "product policy covers {a1}x{a2} joint actions, instance has {num_actions}"
                    )));
                }
                let mut probs = Array3::zeros((h, s, num_actions));
                for hh in 0..h {
                    for ss in 0..s {
                        for i in 0..a1 {
                            for j in 0..a2 {
                                probs[[hh, ss, i * a2 + j]] = max[[hh, ss, i]] * min[[hh, ss, j]];
                            }
                        }
                    }
                }
                Ok(probs)
            }
        }
    }

    pub(crate) fn check_shape(&self, dims: Dims) -> Result<Array3<f64>> {
        if self.horizon() != dims.horizon || self.num_states() != dims.states {
            return Err(Error::shape(format!(
                "policy is over (H={}, S={}), instance has (H={}, S={})",
                self.horizon(),
                self.num_states(),
                dims.horizon,
                dims.states
            )));
        }
        self.probabilities(dims.actions)
    }
}

fn validate_mixed(probs: &Array3<f64>) -> Result<()> {
    let (_, s, _) = probs.dim();
    for (i, row) in probs.lanes(Axis(2)).into_iter().enumerate() {
        check_distribution(row.iter().copied(), || format!("policy row (h={}, s={})", i / s, i % s))?;
    }
    Ok(())
}

/// Initial-state distribution `ξ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct InitDist(Array1<f64>);

impl InitDist {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        check_distribution(probs.iter().copied(), || "initial distribution".to_string())?;
        Ok(Self(probs))
    }

    pub fn uniform(states: usize) -> Self {
        Self(Array1::from_elem(states, 1.0 / states as f64))
    }

    pub fn point(states: usize, state: usize) -> Self {
        let mut probs = Array1::zeros(states);
        probs[state] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Σ_s ξ(s) v(s)`.
    pub fn expect(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

impl TryFrom<Vec<f64>> for InitDist {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        InitDist::new(Array1::from(v))
    }
}

impl From<InitDist> for Vec<f64> {
    fn from(d: InitDist) -> Self {
        d.0.to_vec()
    }
}

/// State and state-action occupancy measures, indexed by zero-based step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTables {
    /// `d_h(s)`, shape `(H, S)`.
    pub state: Array2<f64>,
    /// `d_h(s, a)`, shape `(H, S, A)`.
    pub state_action: Array3<f64>,
}
