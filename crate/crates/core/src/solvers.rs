//! Pessimistic value iteration over aggregated multi-source models: the
//! plain MDP solver, the zero-sum game variant, the KL-robust variant, and
//! the single-source / averaged / pooled baselines.

use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{aggregate_model, AggregatedModel, VisitCounts};
use crate::dp::argmax;
use crate::error::{Error, Result};
use crate::matrix_game::{ne_matrix_game, DEFAULT_NE_TOL};
use crate::model::{InitDist, Policy};
use crate::robust::kl_dual_inf;

/// How the source-uncertainty term scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceMode {
    #[default]
    WorstCase,
    /// Multiply the source term by `σ_g²` inside the square root.
    Adaptive { sigma_g: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub c: f64,
    pub delta: f64,
    #[serde(default)]
    pub variance: VarianceMode,
    /// Replace `log(SAH/δ)` by a fixed number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_factor_override: Option<f64>,
    /// Drop `Γ^β`; single-source PEVI.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub include_source_term: bool,
    #[serde(skip)]
    disabled: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig::new(1.0, 0.05)
    }
}

impl PenaltyConfig {
    pub fn new(c: f64, delta: f64) -> Self {
        PenaltyConfig {
            c,
            delta,
            variance: VarianceMode::WorstCase,
            log_factor_override: None,
            include_source_term: true,
            disabled: false,
        }
    }

    /// Penalty identically zero on visited tuples; unvisited tuples keep
    /// the clamp. Reduces every solver to value iteration on the estimate.
    pub fn zero() -> Self {
        PenaltyConfig {
            disabled: true,
            ..Self::default()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.disabled
    }

    pub fn without_source_term(mut self) -> Self {
        self.include_source_term = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::param("c", format!("must be positive, got {}", self.c)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if let VarianceMode::Adaptive { sigma_g } = self.variance {
            if !(sigma_g >= 0.0 && sigma_g.is_finite()) {
                return Err(Error::param("sigma_g", "must be non-negative"));
            }
        }
        Ok(())
    }

    /// `log(S·A·H/δ)` unless overridden.
    pub fn log_factor(&self, states: usize, actions: usize, horizon: usize) -> f64 {
        self.log_factor_override
            .unwrap_or_else(|| ((states * actions * horizon) as f64 / self.delta).ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    /// Sample-uncertainty part `Γ^α`.
    pub alpha: f64,
    /// Source-uncertainty part `Γ^β`.
    pub beta: f64,
    /// `min(Γ^α + Γ^β, H)`.
    pub total: f64,
}

/// Penalty at one tuple. `visits` are the `N_{h,l}(s,a)` of every source;
/// zeros are skipped, so `L̂` is the number of positive entries.
pub fn penalty_gamma(visits: &[u64], horizon: usize, log_factor: f64, cfg: &PenaltyConfig) -> Penalty {
    let h = horizon as f64;
    let active: Vec<f64> = visits.iter().filter(|&&n| n > 0).map(|&n| n as f64).collect();
    if active.is_empty() {
        return Penalty {
            alpha: h,
            beta: h,
            total: h,
        };
    }
    if cfg.disabled {
        return Penalty {
            alpha: 0.0,
            beta: 0.0,
            total: 0.0,
        };
    }
    let l_hat = active.len() as f64;
    let hh_log = h * h * log_factor;
    let alpha = cfg.c * active.iter().map(|n| hh_log / (l_hat * l_hat * n)).sum::<f64>().sqrt();
    let scale = match cfg.variance {
        VarianceMode::WorstCase => 1.0,
        VarianceMode::Adaptive { sigma_g } => sigma_g * sigma_g,
    };
    let beta = if cfg.include_source_term {
        cfg.c * (hh_log * scale / l_hat).sqrt()
    } else {
        0.0
    };
    Penalty {
        alpha,
        beta,
        total: (alpha + beta).min(h),
    }
}

/// Robust penalty `Γ^σ` at one tuple.
pub fn robust_penalty(
    visits: &[u64],
    p_min: Option<f64>,
    sigma: f64,
    horizon: usize,
    log_factor: f64,
    cfg: &PenaltyConfig,
) -> f64 {
    let h = horizon as f64;
    let active: Vec<f64> = visits.iter().filter(|&&n| n > 0).map(|&n| n as f64).collect();
    let Some(p_min) = p_min.filter(|_| !active.is_empty()) else {
        return h;
    };
    if cfg.disabled {
        return 0.0;
    }
    let l_hat = active.len() as f64;
    let scale = cfg.c / (sigma * p_min);
    let sample = active
        .iter()
        .map(|n| h * h * log_factor / (l_hat * l_hat * n))
        .sum::<f64>()
        .sqrt();
    let source = if cfg.include_source_term {
        (h * h * log_factor / l_hat).sqrt()
    } else {
        0.0
    };
    let reward = (log_factor / l_hat).sqrt();
    (scale * sample + scale * source + cfg.c * reward).min(h)
}

/// Learned policy with its pessimistic tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOutput {
    pub policy: Policy,
    /// `V̂_h(s)`, shape `(H + 1, S)`, last row zero.
    pub values: Array2<f64>,
    /// `Q̂_h(s, a)`.
    pub q: Array3<f64>,
    /// `Γ_h(s, a)`.
    pub penalty: Array3<f64>,
}

impl SolverOutput {
    /// `V̂_1(ξ)`.
    pub fn initial_value(&self, xi: &InitDist) -> f64 {
        xi.expect(self.values.row(0).iter().copied())
    }
}

fn penalty_table(model: &AggregatedModel, log_factor: f64, cfg: &PenaltyConfig) -> Array3<f64> {
    let d = model.dims;
    Array3::from_shape_fn((d.horizon, d.states, d.actions), |(h, s, a)| {
        penalty_gamma(&model.visit_counts(h, s, a), d.horizon, log_factor, cfg).total
    })
}

/// `max(r̂ + P̂·V̂_{h+1} − Γ, 0)` at one tuple.
fn pessimistic_q(model: &AggregatedModel, h: usize, s: usize, a: usize, next: &[f64], gamma: f64) -> f64 {
    let backup: f64 = model
        .transitions
        .slice(s![h, s, a, ..])
        .iter()
        .zip(next)
        .map(|(p, v)| p * v)
        .sum();
    (model.rewards[[h, s, a]] + backup - gamma).max(0.0)
}

fn greedy(model: &AggregatedModel, penalty: Array3<f64>, backup: impl Fn(usize, usize, usize, &[f64]) -> f64) -> SolverOutput {
    let d = model.dims;
    let mut values = Array2::zeros((d.horizon + 1, d.states));
    let mut q = Array3::zeros((d.horizon, d.states, d.actions));
    let mut actions = Array2::zeros((d.horizon, d.states));
    for h in (0..d.horizon).rev() {
        let next = values.row(h + 1).to_vec();
        for s in 0..d.states {
            for a in 0..d.actions {
                q[[h, s, a]] = backup(h, s, a, &next);
            }
            let best = argmax(q.slice(s![h, s, ..]).iter().copied());
            actions[[h, s]] = best;
            values[[h, s]] = q[[h, s, best]];
        }
    }
    SolverOutput {
        policy: Policy::deterministic(actions),
        values,
        q,
        penalty,
    }
}

/// Pessimistic value iteration on the aggregated model.
pub fn hetpevi(model: &AggregatedModel, cfg: &PenaltyConfig) -> Result<SolverOutput> {
    cfg.validate()?;
    let d = model.dims;
    let log_factor = cfg.log_factor(d.states, d.actions, d.horizon);
    let penalty = penalty_table(model, log_factor, cfg);
    Ok(greedy(model, penalty.clone(), |h, s, a, next| {
        pessimistic_q(model, h, s, a, next, penalty[[h, s, a]])
    }))
}

/// Game variant: `model` is over joint actions `a1 * A2 + a2`; each state's
/// pessimistic Q-matrix is solved as a zero-sum matrix game.
pub fn hetpevi_game(
    model: &AggregatedModel,
    max_actions: usize,
    min_actions: usize,
    cfg: &PenaltyConfig,
) -> Result<SolverOutput> {
    cfg.validate()?;
    let d = model.dims;
    if max_actions * min_actions != d.actions {
        return Err(Error::shape(format!(
            "model has {} joint actions, expected {max_actions}x{min_actions}",
            d.actions
        )));
    }
    let log_factor = cfg.log_factor(d.states, d.actions, d.horizon);
    let penalty = penalty_table(model, log_factor, cfg);
    let mut values = Array2::zeros((d.horizon + 1, d.states));
    let mut q = Array3::zeros((d.horizon, d.states, d.actions));
    let mut mu = Array3::zeros((d.horizon, d.states, max_actions));
    let mut nu = Array3::zeros((d.horizon, d.states, min_actions));
    for h in (0..d.horizon).rev() {
        let next = values.row(h + 1).to_vec();
        for s in 0..d.states {
            for a in 0..d.actions {
                q[[h, s, a]] = pessimistic_q(model, h, s, a, &next, penalty[[h, s, a]]);
            }
            let payoff = q
                .slice(s![h, s, ..])
                .to_owned()
                .into_shape_with_order((max_actions, min_actions))
                .expect("joint action count checked above");
            let ne = ne_matrix_game(payoff.view(), DEFAULT_NE_TOL)
                .map_err(|e| e.context(format!("equilibrium at (h={h}, s={s})")))?;
            let (row, col) = (Array1::from(ne.row), Array1::from(ne.col));
            values[[h, s]] = row.dot(&payoff.dot(&col));
            mu.slice_mut(s![h, s, ..]).assign(&row);
            nu.slice_mut(s![h, s, ..]).assign(&col);
        }
    }
    Ok(SolverOutput {
        policy: Policy::product(mu, nu)?,
        values,
        q,
        penalty,
    })
}

/// KL-robust variant with radius `sigma`.
pub fn hetpevi_robust(model: &AggregatedModel, sigma: f64, cfg: &PenaltyConfig) -> Result<SolverOutput> {
    cfg.validate()?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::input(format!("KL radius must be positive, got {sigma}")));
    }
    let d = model.dims;
    let log_factor = cfg.log_factor(d.states, d.actions, d.horizon);
    let penalty = Array3::from_shape_fn((d.horizon, d.states, d.actions), |(h, s, a)| {
        robust_penalty(&model.visit_counts(h, s, a), model.p_min(h, s, a), sigma, d.horizon, log_factor, cfg)
    });
    let mut values = Array2::zeros((d.horizon + 1, d.states));
    let mut q = Array3::zeros((d.horizon, d.states, d.actions));
    let mut actions = Array2::zeros((d.horizon, d.states));
    for h in (0..d.horizon).rev() {
        let next = values.row(h + 1).to_vec();
        for s in 0..d.states {
            for a in 0..d.actions {
                let gamma = penalty[[h, s, a]];
                q[[h, s, a]] = if model.active[[h, s, a]] == 0 {
                    0.0
                } else {
                    let worst = kl_dual_inf(&next, &model.row(h, s, a), sigma)?;
                    (model.rewards[[h, s, a]] + worst - gamma).max(0.0)
                };
            }
            let best = argmax(q.slice(s![h, s, ..]).iter().copied());
            actions[[h, s]] = best;
            values[[h, s]] = q[[h, s, best]];
        }
    }
    Ok(SolverOutput {
        policy: Policy::deterministic(actions),
        values,
        q,
        penalty,
    })
}

/// Single-source PEVI: penalty `c·sqrt(H²·log(SAH/δ)/N)`, `H` where `N = 0`.
pub fn pevi_single(counts: &VisitCounts, cfg: &PenaltyConfig) -> Result<SolverOutput> {
    hetpevi(&aggregate_model(std::slice::from_ref(counts))?, &cfg.without_source_term())
}

/// PEVI on all sources merged into one dataset.
pub fn pevi_pooled(counts: &[VisitCounts], cfg: &PenaltyConfig) -> Result<SolverOutput> {
    hetpevi(&AggregatedModel::pooled(counts)?, &cfg.without_source_term())
}

/// At each `(h, s)`, the empirical distribution of the actions recommended
/// by `policies`.
pub fn avg_pevi(policies: &[Policy], num_actions: usize) -> Result<Policy> {
    let first = policies
        .first()
        .ok_or_else(|| Error::input("averaging needs at least one policy"))?;
    let (hn, sn) = (first.horizon(), first.num_states());
    let mut probs = Array3::zeros((hn, sn, num_actions));
    let w = 1.0 / policies.len() as f64;
    for p in policies {
        if (p.horizon(), p.num_states()) != (hn, sn) {
            return Err(Error::shape("averaged policies disagree on (H, S)"));
        }
        probs.scaled_add(w, &p.probabilities(num_actions)?);
    }
    Policy::mixed(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fixed_log(c: f64) -> PenaltyConfig {
        PenaltyConfig {
            log_factor_override: Some(4.0),
            ..PenaltyConfig::new(c, 0.05)
        }
    }

    #[test]
    fn two_source_penalty() {
        let cfg = fixed_log(1.0);
        let p = penalty_gamma(&[16, 0, 144], 3, cfg.log_factor(1, 1, 1), &cfg);
        assert_abs_diff_eq!(p.alpha, 0.625f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(p.beta, 18f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(p.total, 3.0);
    }

    #[test]
    fn nine_source_penalty() {
        let cfg = fixed_log(1.0);
        let p = penalty_gamma(&[400; 9], 3, 4.0, &cfg);
        assert_abs_diff_eq!(p.alpha, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.beta, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.total, 2.1, epsilon = 1e-12);
    }

    #[test]
    fn no_visits_clamps() {
        let p = penalty_gamma(&[0, 0], 5, 3.0, &PenaltyConfig::zero());
        assert_eq!((p.alpha, p.beta, p.total), (5.0, 5.0, 5.0));
        assert_eq!(robust_penalty(&[0], None, 0.1, 5, 3.0, &PenaltyConfig::default()), 5.0);
    }

    #[test]
    fn adaptive_scales_source_term() {
        let mut cfg = fixed_log(1.0);
        cfg.variance = VarianceMode::Adaptive { sigma_g: 0.5 };
        let p = penalty_gamma(&[400; 9], 3, 4.0, &cfg);
        assert_abs_diff_eq!(p.beta, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PenaltyConfig::new(0.0, 0.1).validate().is_err());
        assert!(PenaltyConfig::new(1.0, 1.0).validate().is_err());
        assert!(PenaltyConfig::new(1.0, 0.1).validate().is_ok());
    }

    #[test]
    fn averaging_counts_duplicates() {
        let mk = |a| Policy::constant(1, 1, a);
        let p = avg_pevi(&[mk(1), mk(1), mk(1), mk(2)], 3).unwrap();
        let probs = p.probabilities(3).unwrap();
        assert_abs_diff_eq!(probs[[0, 0, 1]], 0.75);
        assert_abs_diff_eq!(probs[[0, 0, 2]], 0.25);
        let single = avg_pevi(&[mk(2)], 3).unwrap().probabilities(3).unwrap();
        assert_eq!(single[[0, 0, 2]], 1.0);
    }

    #[test]
    fn penalty_config_serde_defaults() {
        let cfg: PenaltyConfig = serde_json::from_str(r#"{"c": 2.0, "delta": 0.05}"#).unwrap();
        assert_eq!(cfg, PenaltyConfig::new(2.0, 0.05));
    }
}
