//! Random data-source generation around a target instance, bounded
//! (rejection-sampled) sources for the robust setting, and the two-point
//! hard instances used to demonstrate the source-diversity lower bound.

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EpisodicMdp, InitDist, Policy, RobustSpec, ZeroSumGame, SUPPORT_FLOOR};
use crate::seed::{mix, rng};

/// Distribution of a source MDP around its target. Every mode has the
/// target's rewards as its mean; transitions are mean-exact for
/// `Degenerate` and `DirichletBernoulli`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    /// Every source equals the target.
    Degenerate,
    /// Rows `~ Dirichlet(κ·P_h(·|s,a))`, rewards one `Bernoulli(r_h(s,a))` draw.
    DirichletBernoulli { concentration: f64 },
    /// Gaussian logit noise (truncated at ±3σ_g) on the row support,
    /// renormalized; rewards get symmetric clipped Gaussian noise. The
    /// renormalization biases transition means slightly.
    SubGaussian { sigma_g: f64 },
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::DirichletBernoulli { concentration: 1.0 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GeneratorConfig::Degenerate => Ok(()),
            GeneratorConfig::DirichletBernoulli { concentration } => {
                if concentration > 0.0 && concentration.is_finite() {
                    Ok(())
                } else {
                    Err(Error::param("concentration", "must be positive"))
                }
            }
            GeneratorConfig::SubGaussian { sigma_g } => {
                if sigma_g >= 0.0 && sigma_g.is_finite() {
                    Ok(())
                } else {
                    Err(Error::param("sigma_g", "must be non-negative"))
                }
            }
        }
    }

    /// Draw one perturbed transition row. Zero entries stay exactly zero.
    pub fn sample_row(&self, rng: &mut ChaCha8Rng, row: &[f64]) -> Vec<f64> {
        match *self {
            GeneratorConfig::Degenerate => row.to_vec(),
            GeneratorConfig::DirichletBernoulli { concentration } => {
                let logs: Vec<Option<f64>> = row
                    .iter()
                    .map(|&p| (p > SUPPORT_FLOOR).then(|| ln_gamma_variate(rng, concentration * p)))
                    .collect();
                softmax_support(&logs)
            }
            GeneratorConfig::SubGaussian { sigma_g } => {
                let logs: Vec<Option<f64>> = row
                    .iter()
                    .map(|&p| {
                        (p > SUPPORT_FLOOR).then(|| {
                            let z: f64 = StandardNormal.sample(rng);
                            p.ln() + sigma_g * z.clamp(-3.0, 3.0)
                        })
                    })
                    .collect();
                softmax_support(&logs)
            }
        }
    }

    pub fn sample_reward(&self, rng: &mut ChaCha8Rng, reward: f64) -> f64 {
        match *self {
            GeneratorConfig::Degenerate => reward,
            GeneratorConfig::DirichletBernoulli { .. } => {
                if rng.random::<f64>() < reward {
                    1.0
                } else {
                    0.0
                }
            }
            GeneratorConfig::SubGaussian { sigma_g } => {
                let z: f64 = StandardNormal.sample(rng);
                let room = reward.min(1.0 - reward);
                reward + (sigma_g * z).clamp(-room, room)
            }
        }
    }

    /// `σ_g` for the variance-adaptive source penalty, when known.
    pub fn sub_gaussian_scale(&self) -> Option<f64> {
        match *self {
            GeneratorConfig::SubGaussian { sigma_g } => Some(sigma_g),
            GeneratorConfig::Degenerate => Some(0.0),
            GeneratorConfig::DirichletBernoulli { .. } => None,
        }
    }
}

/// `ln G` for `G ~ Gamma(shape, 1)`. Small shapes use
/// `G = G' · U^{1/shape}` with `G' ~ Gamma(shape + 1)`, evaluated in log
/// space so the draw never underflows to zero.
fn ln_gamma_variate(rng: &mut ChaCha8Rng, shape: f64) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        g.max(f64::MIN_POSITIVE).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
        let u = 1.0 - rng.random::<f64>();
        g.max(f64::MIN_POSITIVE).ln() + u.ln() / shape
    }
}

fn softmax_support(logs: &[Option<f64>]) -> Vec<f64> {
    let top = logs.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs
        .iter()
        .map(|l| match l {
            // keep support: a coordinate far below the max becomes a tiny positive mass
            Some(x) => (x - top).exp().max(1e-300),
            None => 0.0,
        })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

fn perturb(target: &EpisodicMdp, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<EpisodicMdp> {
    let d = target.dims();
    let mut transitions = Array4::zeros((d.horizon, d.states, d.actions, d.states));
    let mut rewards = Array3::zeros((d.horizon, d.states, d.actions));
    for h in 0..d.horizon {
        for st in 0..d.states {
            for a in 0..d.actions {
                let row = target.transitions().slice(s![h, st, a, ..]).to_vec();
                let new_row = cfg.sample_row(rng, &row);
                transitions
                    .slice_mut(s![h, st, a, ..])
                    .assign(&ndarray::Array1::from(new_row));
                rewards[[h, st, a]] = cfg.sample_reward(rng, target.reward(h, st, a));
            }
        }
    }
    EpisodicMdp::new(transitions, rewards)
}

/// `L` independent sources around `target`. Source `l` draws from the
/// stream seeded by `mix(seed, l)`, so the result does not depend on
/// generation order.
pub fn generate_sources(
    target: &EpisodicMdp,
    num_sources: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<EpisodicMdp>> {
    cfg.validate()?;
    if num_sources == 0 {
        return Err(Error::param("num_sources", "need at least one source"));
    }
    (0..num_sources)
        .into_par_iter()
        .map(|l| perturb(target, cfg, &mut rng(mix(seed, &[l as u64]))))
        .collect()
}

/// Game sources: the joint-action MDP is perturbed and reshaped back.
pub fn generate_game_sources(
    target: &ZeroSumGame,
    num_sources: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<ZeroSumGame>> {
    let joint = target.joint_mdp()?;
    generate_sources(&joint, num_sources, cfg, seed)?
        .iter()
        .map(|m| ZeroSumGame::from_joint(m, target.max_actions(), target.min_actions()))
        .collect()
}

/// Rejection sampling keeping every source row inside
/// `[lower·P(s'|s,a), upper·P(s'|s,a)]`. Accepted rows are not mean-exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedGeneratorConfig {
    pub base: GeneratorConfig,
    pub lower: f64,
    pub upper: f64,
    /// Per-row attempt budget.
    pub max_attempts: usize,
}

impl BoundedGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.lower > 0.0 && self.lower <= 1.0) {
            return Err(Error::param("lower", format!("must lie in (0, 1], got {}", self.lower)));
        }
        if !(self.upper >= 1.0 && self.upper.is_finite()) {
            return Err(Error::param("upper", format!("must be at least 1, got {}", self.upper)));
        }
        if self.max_attempts == 0 {
            return Err(Error::param("max_attempts", "must be positive"));
        }
        Ok(())
    }

    fn accepts(&self, nominal: &[f64], row: &[f64]) -> bool {
        const SLACK: f64 = 1e-12;
        nominal
            .iter()
            .zip(row)
            .all(|(p, x)| *x >= self.lower * p - SLACK && *x <= self.upper * p + SLACK)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub draws: u64,
    pub accepted: u64,
}

impl RejectionStats {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.draws as f64
    }
}

pub fn generate_bounded_sources(
    spec: &RobustSpec,
    num_sources: usize,
    cfg: &BoundedGeneratorConfig,
    seed: u64,
) -> Result<Vec<EpisodicMdp>> {
    Ok(generate_bounded_sources_with_stats(spec, num_sources, cfg, seed)?.0)
}

pub fn generate_bounded_sources_with_stats(
    spec: &RobustSpec,
    num_sources: usize,
    cfg: &BoundedGeneratorConfig,
    seed: u64,
) -> Result<(Vec<EpisodicMdp>, RejectionStats)> {
    cfg.validate()?;
    if num_sources == 0 {
        return Err(Error::param("num_sources", "need at least one source"));
    }
    let nominal = spec.nominal();
    let d = nominal.dims();
    for h in 0..d.horizon {
        for st in 0..d.states {
            for a in 0..d.actions {
                let row = nominal.transitions().slice(s![h, st, a, ..]);
                let lo: f64 = row.iter().map(|p| cfg.lower * p).sum();
                let hi: f64 = row.iter().map(|p| cfg.upper * p).sum();
                if lo > 1.0 + 1e-12 || hi < 1.0 - 1e-12 {
                    return Err(Error::Generation {
                        state: st,
                        action: a,
                        step: h,
                        reason: "bounding box misses the simplex".into(),
                    });
                }
            }
        }
    }
    let results: Vec<Result<(EpisodicMdp, RejectionStats)>> = (0..num_sources)
        .into_par_iter()
        .map(|l| {
            let mut rng = rng(mix(seed, &[l as u64]));
            let mut stats = RejectionStats::default();
            let mut transitions = Array4::zeros((d.horizon, d.states, d.actions, d.states));
            let mut rewards = Array3::zeros((d.horizon, d.states, d.actions));
            for h in 0..d.horizon {
                for st in 0..d.states {
                    for a in 0..d.actions {
                        let row = nominal.transitions().slice(s![h, st, a, ..]).to_vec();
                        let mut accepted = None;
                        for _ in 0..cfg.max_attempts {
                            stats.draws += 1;
                            let cand = cfg.base.sample_row(&mut rng, &row);
                            if cfg.accepts(&row, &cand) {
                                stats.accepted += 1;
                                accepted = Some(cand);
                                break;
                            }
                        }
                        let cand = accepted.ok_or_else(|| Error::Generation {
                            state: st,
                            action: a,
                            step: h,
                            reason: format!(
                                "source {l}: no draw inside the bounds after {} attempts",
                                cfg.max_attempts
                            ),
                        })?;
                        transitions
                            .slice_mut(s![h, st, a, ..])
                            .assign(&ndarray::Array1::from(cand));
                        rewards[[h, st, a]] = cfg.base.sample_reward(&mut rng, nominal.reward(h, st, a));
                    }
                }
            }
            Ok((EpisodicMdp::new(transitions, rewards)?, stats))
        })
        .collect();
    let mut sources = Vec::with_capacity(num_sources);
    let mut total = RejectionStats::default();
    for r in results {
        let (m, st) = r?;
        total.draws += st.draws;
        total.accepted += st.accepted;
        sources.push(m);
    }
    Ok((sources, total))
}

/// Random instance with `Dirichlet(1)` rows and `Uniform[0, 1]` rewards.
pub fn random_mdp(horizon: usize, states: usize, actions: usize, seed: u64) -> Result<EpisodicMdp> {
    if horizon == 0 || states == 0 || actions == 0 {
        return Err(Error::param("dims", "horizon, states and actions must be positive"));
    }
    let mut rng = rng(seed);
    let flat = GeneratorConfig::DirichletBernoulli { concentration: states as f64 };
    let uniform = vec![1.0 / states as f64; states];
    let mut transitions = Array4::zeros((horizon, states, actions, states));
    for mut row in transitions.lanes_mut(ndarray::Axis(3)) {
        row.assign(&ndarray::Array1::from(flat.sample_row(&mut rng, &uniform)));
    }
    let rewards = Array3::from_shape_simple_fn((horizon, states, actions), || rng.random::<f64>());
    EpisodicMdp::new(transitions, rewards)
}

/// Random zero-sum game, built as a random joint-action MDP.
pub fn random_game(horizon: usize, states: usize, max_actions: usize, min_actions: usize, seed: u64) -> Result<ZeroSumGame> {
    ZeroSumGame::from_joint(&random_mdp(horizon, states, max_actions * min_actions, seed)?, max_actions, min_actions)
}

/// Which side of the lower bound the hard instance exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `α = 1/2 − 16ε/H`, `Δ = 1/8`: few sources cannot identify the target.
    SourceLimited,
    /// `α = 1/4`, `Δ = 8ε/H`: few samples cannot identify the target.
    SampleLimited,
}

/// Derived parameters of a hard instance, serialized for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardInstanceParams {
    pub horizon: usize,
    pub num_states: usize,
    pub coverage: f64,
    pub epsilon: f64,
    pub regime: Regime,
    pub alpha: f64,
    pub gap_delta: f64,
    pub p_prime: f64,
    pub p: f64,
    pub q: f64,
    pub q_prime: f64,
    /// `(H − 1)(1 − 2α)Δ`, the gap of choosing the wrong action at the root.
    pub separation: f64,
}

/// Two targets `M⁰, M¹` that differ only in which of actions 0 and 1 is
/// better at state 0 of the first step, each a two-point mixture of the
/// source MDPs `N⁰, N¹`.
#[derive(Clone, Debug)]
pub struct HardInstance {
    pub params: HardInstanceParams,
    pub targets: [EpisodicMdp; 2],
    pub sources: [EpisodicMdp; 2],
    /// Test distribution: all mass on state 0.
    pub test_init: InitDist,
    /// Dataset distribution `μ(0) = 1/(CS)`, `μ(1) = 1 − 1/(CS)`.
    pub data_init: InitDist,
    /// Uniform over actions {0, 1}.
    pub good_behavior: Policy,
    /// Always action 2.
    pub bad_behavior: Policy,
}

const HARD_ACTIONS: usize = 3;

fn hard_mdp(horizon: usize, states: usize, root: [f64; 3]) -> Result<EpisodicMdp> {
    let mut p = Array4::zeros((horizon, states, HARD_ACTIONS, states));
    for h in 0..horizon {
        for st in 0..states {
            for a in 0..HARD_ACTIONS {
                if h == 0 && st == 0 {
                    p[[h, st, a, 0]] = root[a];
                    p[[h, st, a, 1]] = 1.0 - root[a];
                } else {
                    p[[h, st, a, st]] = 1.0;
                }
            }
        }
    }
    let r = Array3::from_shape_fn((horizon, states, HARD_ACTIONS), |(_, st, _)| if st == 0 { 1.0 } else { 0.0 });
    EpisodicMdp::new(p, r)
}

pub fn build_hard_instance(
    horizon: usize,
    states: usize,
    coverage: f64,
    epsilon: f64,
    regime: Regime,
) -> Result<HardInstance> {
    if horizon < 4 {
        return Err(Error::param("horizon", format!("must be at least 4, got {horizon}")));
    }
    if states < 2 {
        return Err(Error::param("states", "need at least two states"));
    }
    let h = horizon as f64;
    if !(epsilon > 0.0 && epsilon < h / 64.0) {
        return Err(Error::param("epsilon", format!("must lie in (0, H/64) = (0, {}), got {epsilon}", h / 64.0)));
    }
    let mu0 = 1.0 / (coverage * states as f64);
    if !(coverage > 0.0 && mu0 <= 0.25) {
        return Err(Error::param("coverage", format!("need 1/(C·S) ≤ 1/4, got {mu0}")));
    }
    let (alpha, gap_delta) = match regime {
        Regime::SourceLimited => (0.5 - 16.0 * epsilon / h, 0.125),
        Regime::SampleLimited => (0.25, 8.0 * epsilon / h),
    };
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::param("alpha", format!("derived α = {alpha} outside (0, 1/2]")));
    }
    if gap_delta > 0.125 {
        return Err(Error::param("gap_delta", format!("derived Δ = {gap_delta} exceeds 1/8")));
    }
    let p_prime = 0.75 - 1.0 / h + gap_delta;
    let p = p_prime - alpha * gap_delta;
    let q_prime = p_prime - gap_delta;
    let q = q_prime + alpha * gap_delta;
    if !(7.0 / 8.0 > p_prime && p_prime > p && p > q && q > q_prime && q_prime >= 0.5) {
        return Err(Error::param(
            "gap_delta",
            format!("parameter chain 7/8 > p'={p_prime} > p={p} > q={q} > q'={q_prime} ≥ 1/2 violated"),
        ));
    }
    let params = HardInstanceParams {
        horizon,
        num_states: states,
        coverage,
        epsilon,
        regime,
        alpha,
        gap_delta,
        p_prime,
        p,
        q,
        q_prime,
        separation: (h - 1.0) * (1.0 - 2.0 * alpha) * gap_delta,
    };
    let targets = [
        hard_mdp(horizon, states, [p, q, q])?,
        hard_mdp(horizon, states, [q, p, q])?,
    ];
    let sources = [
        hard_mdp(horizon, states, [p_prime, q_prime, q])?,
        hard_mdp(horizon, states, [q_prime, p_prime, q])?,
    ];
    let mut data = vec![0.0; states];
    data[0] = mu0;
    data[1] = 1.0 - mu0;
    let mut good = Array3::zeros((horizon, states, HARD_ACTIONS));
    good.slice_mut(s![.., .., 0..2]).fill(0.5);
    Ok(HardInstance {
        params,
        targets,
        sources,
        test_init: InitDist::point(states, 0),
        data_init: InitDist::new(data.into())?,
        good_behavior: Policy::Mixed { probs: good },
        bad_behavior: Policy::Deterministic {
            actions: Array2::from_elem((horizon, states), 2),
        },
    })
}

impl HardInstance {
    /// Draw `count` sources for target `φ`: each is `N^φ` with probability
    /// `1 − α` and `N^{1−φ}` otherwise. The uniform driving source `l` is
    /// shared across `φ`, so the two targets see mirrored draws.
    pub fn sample_sources(&self, phi: usize, count: usize, seed: u64) -> Vec<EpisodicMdp> {
        (0..count)
            .map(|l| {
                let u: f64 = rng(mix(seed, &[l as u64])).random();
                let chi = if u < self.params.alpha { 1 - phi } else { phi };
                self.sources[chi].clone()
            })
            .collect()
    }

    /// Behavior policies: the first `good` sources use `ρ^g`, the rest `ρ^b`.
    pub fn behaviors(&self, good: usize, total: usize) -> Vec<Policy> {
        (0..total)
            .map(|l| {
                if l < good {
                    self.good_behavior.clone()
                } else {
                    self.bad_behavior.clone()
                }
            })
            .collect()
    }
}
