//! Ground-truth coverage quantities and sub-optimality gaps.

use ndarray::{s, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dp::{evaluate_policy, occupancy, optimal_policy};
use crate::error::{Error, Result};
use crate::game::{best_response, solve_game};
use crate::matrix_game::DEFAULT_NE_TOL;
use crate::model::{EpisodicMdp, InitDist, Policy, RobustSpec, ZeroSumGame};
use crate::robust::{robust_optimal_policy, robust_policy_value};

/// Occupancies at or below this are treated as zero.
pub const OCCUPANCY_EPS: f64 = 1e-12;

/// `𝓛_h(s, a)` for every tuple, with the behavior occupancies that decided
/// membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageSets {
    /// `d^{ρ_l}_h(s, a; ξ_l)` per source.
    pub occupancies: Vec<Array3<f64>>,
}

impl CoverageSets {
    pub fn num_sources(&self) -> usize {
        self.occupancies.len()
    }

    pub fn members(&self, h: usize, s: usize, a: usize) -> Vec<usize> {
        (0..self.num_sources())
            .filter(|&l| self.occupancies[l][[h, s, a]] > OCCUPANCY_EPS)
            .collect()
    }

    fn shape(&self) -> (usize, usize, usize) {
        self.occupancies[0].dim()
    }

    /// `Σ_{l∈𝓛} min(d, clip) / (|𝓛|·d_l)` at one tuple; `None` when `d > 0`
    /// but no source covers the tuple.
    fn ratio(&self, h: usize, s: usize, a: usize, d: f64, clip: f64) -> Option<f64> {
        let members = self.members(h, s, a);
        if d <= OCCUPANCY_EPS {
            return Some(0.0);
        }
        if members.is_empty() {
            return None;
        }
        let num = d.min(clip);
        let n = members.len() as f64;
        Some(members.iter().map(|&l| num / (n * self.occupancies[l][[h, s, a]])).sum())
    }
}

/// Membership from exact behavior occupancies on each source.
pub fn coverage_sets(sources: &[EpisodicMdp], behaviors: &[Policy], inits: &[InitDist]) -> Result<CoverageSets> {
    if sources.is_empty() || sources.len() != behaviors.len() || sources.len() != inits.len() {
        return Err(Error::shape(format!(
            "coverage needs aligned non-empty lists, got {} sources, {} behaviors, {} inits",
            sources.len(),
            behaviors.len(),
            inits.len()
        )));
    }
    let dims = sources[0].dims();
    let occupancies = sources
        .iter()
        .zip(behaviors)
        .zip(inits)
        .map(|((m, b), xi)| {
            if m.dims() != dims {
                return Err(Error::shape("sources disagree on (H, S, A)"));
            }
            Ok(occupancy(m, b, xi)?.state_action)
        })
        .collect::<Result<_>>()?;
    Ok(CoverageSets { occupancies })
}

/// Game sources: membership over joint actions.
pub fn coverage_sets_game(sources: &[ZeroSumGame], behaviors: &[Policy], inits: &[InitDist]) -> Result<CoverageSets> {
    let joint = sources.iter().map(|g| g.joint_mdp()).collect::<Result<Vec<_>>>()?;
    coverage_sets(&joint, behaviors, inits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageKind {
    Mdp,
    Game,
    /// Nominal-occupancy proxy for the robust quantities.
    RobustProxy,
}

/// Collective coverage summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub kind: CoverageKind,
    /// `L†`: fewest covering sources over required tuples; 0 if one is uncovered.
    pub min_sources: usize,
    /// `C†`; infinite when a required tuple is uncovered.
    #[serde(with = "inf_as_string")]
    pub collective_coverage: f64,
    /// Smallest positive target occupancy over required tuples.
    pub d_min: f64,
    /// True when `collective_coverage` only lower-bounds the real quantity.
    pub lower_bound: bool,
    /// Target occupancy used for the required-tuple test and the numerator.
    pub target_occupancy: Array3<f64>,
    /// `|𝓛_h(s, a)|`.
    pub set_sizes: Array3<usize>,
}

mod inf_as_string {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// `target_occ` decides which tuples are required and, through `numerator`,
/// what enters the ratio.
fn summarize(
    kind: CoverageKind,
    sets: &CoverageSets,
    target_occ: Array3<f64>,
    numerator: &Array3<f64>,
    clip: f64,
) -> Result<CoverageReport> {
    if sets.shape() != target_occ.dim() {
        return Err(Error::shape(format!(
            "coverage sets have shape {:?}, target occupancy {:?}",
            sets.shape(),
            target_occ.dim()
        )));
    }
    let set_sizes = Array3::from_shape_fn(sets.shape(), |(h, s, a)| sets.members(h, s, a).len());
    let mut min_sources = usize::MAX;
    let mut coverage: f64 = 0.0;
    let mut d_min = f64::INFINITY;
    for ((h, s, a), &d) in target_occ.indexed_iter() {
        if d <= OCCUPANCY_EPS {
            continue;
        }
        min_sources = min_sources.min(set_sizes[[h, s, a]]);
        d_min = d_min.min(d);
        coverage = coverage.max(sets.ratio(h, s, a, numerator[[h, s, a]], clip).unwrap_or(f64::INFINITY));
    }
    if min_sources == 0 {
        coverage = f64::INFINITY;
    }
    Ok(CoverageReport {
        kind,
        min_sources: if min_sources == usize::MAX { 0 } else { min_sources },
        collective_coverage: coverage,
        d_min,
        lower_bound: kind == CoverageKind::RobustProxy,
        target_occupancy: target_occ,
        set_sizes,
    })
}

/// `L†` and `C†` with respect to the optimal policy of `target` from `xi`.
pub fn coverage_params(target: &EpisodicMdp, xi: &InitDist, sets: &CoverageSets) -> Result<CoverageReport> {
    let (pi_star, _) = optimal_policy(target);
    let d = occupancy(target, &pi_star, xi)?.state_action;
    let clip = 1.0 / target.num_states() as f64;
    summarize(CoverageKind::Mdp, sets, d.clone(), &d, clip)
}

/// Robust analogue evaluated with nominal occupancies of the robust optimal
/// policy. The true quantity maximizes over the uncertainty set, so the
/// reported coverage is a lower bound.
pub fn coverage_params_robust(spec: &RobustSpec, xi: &InitDist, sets: &CoverageSets) -> Result<CoverageReport> {
    let (pi_star, _) = robust_optimal_policy(spec)?;
    let d = occupancy(spec.nominal(), &pi_star, xi)?.state_action;
    let clip = 1.0 / spec.nominal().num_states() as f64;
    summarize(CoverageKind::RobustProxy, sets, d.clone(), &d, clip)
}

/// Largest probability of being in `target` at step `step` over min-player
/// policies, with the max-player fixed to `mu`.
fn max_reach(game: &ZeroSumGame, mu: &Array3<f64>, xi: &InitDist, step: usize, target: usize) -> f64 {
    let (sn, a1n, a2n) = (game.num_states(), game.max_actions(), game.min_actions());
    let p = game.transitions();
    let mut w: Vec<f64> = (0..sn).map(|x| if x == target { 1.0 } else { 0.0 }).collect();
    for h in (0..step).rev() {
        w = (0..sn)
            .map(|x| {
                (0..a2n)
                    .map(|a2| {
                        (0..a1n)
                            .map(|a1| {
                                mu[[h, x, a1]]
                                    * p.slice(s![h, x, a1, a2, ..]).iter().zip(&w).map(|(q, v)| q * v).sum::<f64>()
                            })
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
    }
    xi.expect(w)
}

/// Game coverage against the equilibrium max-player `μ*`. A joint tuple is
/// required when some min-player policy reaches it; the numerator uses the
/// largest occupancy any min-player policy achieves, clipped at `1/(S·A1)`.
pub fn coverage_params_game(game: &ZeroSumGame, xi: &InitDist, sets: &CoverageSets) -> Result<CoverageReport> {
    let sol = solve_game(game, DEFAULT_NE_TOL)?;
    let Policy::Product { max: mu, .. } = &sol.policy else {
        unreachable!("solve_game returns a product policy")
    };
    let (hn, sn, a1n, a2n) = (game.horizon(), game.num_states(), game.max_actions(), game.min_actions());
    let state_reach: Vec<f64> = (0..hn * sn)
        .into_par_iter()
        .map(|i| max_reach(game, mu, xi, i / sn, i % sn))
        .collect();
    let best = Array3::from_shape_fn((hn, sn, a1n * a2n), |(h, s, a)| {
        // ν can put all its mass on a2 at (h, s) without changing how s was reached
        state_reach[h * sn + s] * mu[[h, s, a / a2n]]
    });
    let clip = 1.0 / (sn * a1n) as f64;
    summarize(CoverageKind::Game, sets, best.clone(), &best, clip)
}

/// `V*_1(ξ) − V^{π̂}_1(ξ)`.
pub fn gap(target: &EpisodicMdp, pi_hat: &Policy, xi: &InitDist) -> Result<f64> {
    let (pi_star, _) = optimal_policy(target);
    Ok(evaluate_policy(target, &pi_star, xi)? - evaluate_policy(target, pi_hat, xi)?)
}

/// Equilibrium value minus the value `μ̂` secures against its best response.
pub fn mg_gap(game: &ZeroSumGame, mu_hat: &Policy, xi: &InitDist) -> Result<f64> {
    let sol = solve_game(game, DEFAULT_NE_TOL)?;
    let (_, secured) = best_response(game, mu_hat, xi)?;
    Ok(sol.value(xi) - secured)
}

/// Robust optimal value minus the robust value of `π̂`.
pub fn r_gap(spec: &RobustSpec, pi_hat: &Policy, xi: &InitDist) -> Result<f64> {
    let (pi_star, _) = robust_optimal_policy(spec)?;
    Ok(robust_policy_value(spec, &pi_star, xi)? - robust_policy_value(spec, pi_hat, xi)?)
}
