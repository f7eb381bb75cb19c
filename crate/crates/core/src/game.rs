//! Exact solution concepts on known zero-sum Markov games.

use ndarray::{s, Array2, Array3};

use crate::dp::{argmax, check_init, policy_values, ValueTables};
use crate::error::{Error, Result};
use crate::matrix_game::ne_matrix_game;
use crate::model::{InitDist, Policy, ZeroSumGame};

/// `V^{μ×ν}_1(ξ)` for any policy over the game's joint actions.
pub fn evaluate_game_policy(game: &ZeroSumGame, policy: &Policy, xi: &InitDist) -> Result<f64> {
    let mdp = game.joint_mdp()?;
    check_init(&mdp, xi)?;
    Ok(policy_values(&mdp, policy)?.initial_value(xi))
}

fn max_player_table(game: &ZeroSumGame, max_policy: &Policy) -> Result<Array3<f64>> {
    let (h, s) = (game.horizon(), game.num_states());
    if max_policy.horizon() != h || max_policy.num_states() != s {
        return Err(Error::shape("max-player policy does not match the game's (H, S)"));
    }
    match max_policy {
        Policy::Product { max, .. } => {
            if max.dim().2 != game.max_actions() {
                return Err(Error::shape("max-player policy does not cover A1"));
            }
            Ok(max.clone())
        }
        other => other.probabilities(game.max_actions()),
    }
}

/// Best response of the min-player against a fixed max-player policy
/// (a `Product` policy contributes its max half). Returns the
/// deterministic min-player policy and `V^{μ×br(μ)}_1(ξ)`.
pub fn best_response(game: &ZeroSumGame, max_policy: &Policy, xi: &InitDist) -> Result<(Policy, f64)> {
    let mu = max_player_table(game, max_policy)?;
    let (horizon, states, a1n, a2n) = (
        game.horizon(),
        game.num_states(),
        game.max_actions(),
        game.min_actions(),
    );
    if xi.len() != states {
        return Err(Error::shape("initial distribution does not match the game's states"));
    }
    let p = game.transitions();
    let r = game.rewards();
    let mut v = vec![0.0; states];
    let mut actions = Array2::zeros((horizon, states));
    for h in (0..horizon).rev() {
        let mut nv = vec![0.0; states];
        for st in 0..states {
            let q: Vec<f64> = (0..a2n)
                .map(|a2| {
                    (0..a1n)
                        .map(|a1| {
                            let w = mu[[h, st, a1]];
                            if w == 0.0 {
                                return 0.0;
                            }
                            let next: f64 = (0..states).map(|x| p[[h, st, a1, a2, x]] * v[x]).sum();
                            w * (r[[h, st, a1, a2]] + next)
                        })
                        .sum()
                })
                .collect();
            let best = argmax(q.iter().map(|x| -x));
            actions[[h, st]] = best;
            nv[st] = q[best];
        }
        v = nv;
    }
    Ok((Policy::deterministic(actions), xi.expect(v)))
}

/// Nash equilibrium of the full game by backward induction, solving a
/// matrix game at every `(h, s)`.
#[derive(Clone, Debug)]
pub struct GameSolution {
    /// `Product` policy `(μ*, ν*)`.
    pub policy: Policy,
    /// `V*_h(s)` with terminal row.
    pub values: Array2<f64>,
}

impl GameSolution {
    pub fn value(&self, xi: &InitDist) -> f64 {
        xi.expect(self.values.row(0).iter().copied())
    }
}

pub fn solve_game(game: &ZeroSumGame, tol: f64) -> Result<GameSolution> {
    let (horizon, states, a1n, a2n) = (
        game.horizon(),
        game.num_states(),
        game.max_actions(),
        game.min_actions(),
    );
    let p = game.transitions();
    let r = game.rewards();
    let mut values = Array2::zeros((horizon + 1, states));
    let mut max = Array3::zeros((horizon, states, a1n));
    let mut min = Array3::zeros((horizon, states, a2n));
    for h in (0..horizon).rev() {
        let next = values.row(h + 1).to_owned();
        for st in 0..states {
            let q = Array2::from_shape_fn((a1n, a2n), |(a1, a2)| {
                r[[h, st, a1, a2]]
                    + p.slice(s![h, st, a1, a2, ..])
                        .iter()
                        .zip(next.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            });
            let sol = ne_matrix_game(q.view(), tol)?;
            max.slice_mut(s![h, st, ..]).assign(&ndarray::Array1::from(sol.row));
            min.slice_mut(s![h, st, ..]).assign(&ndarray::Array1::from(sol.col));
            values[[h, st]] = sol.value;
        }
    }
    Ok(GameSolution {
        policy: Policy::Product { max, min },
        values,
    })
}

/// Value tables of a product policy on the game (joint-action `q`).
pub fn game_policy_values(game: &ZeroSumGame, policy: &Policy) -> Result<ValueTables> {
    policy_values(&game.joint_mdp()?, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::evaluate_policy;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array4, Array5};

    #[test]
    fn degenerate_min_player_matches_mdp_evaluation() {
        let mut p = Array5::from_elem((2, 2, 2, 1, 2), 0.5);
        p[[0, 0, 1, 0, 0]] = 0.9;
        p[[0, 0, 1, 0, 1]] = 0.1;
        let r = Array4::from_shape_fn((2, 2, 2, 1), |(h, s, a, _)| 0.1 * (h + s + a) as f64);
        let game = ZeroSumGame::new(p, r).unwrap();
        let mu = Policy::uniform(2, 2, 2);
        let xi = InitDist::uniform(2);
        let (_, v) = best_response(&game, &mu, &xi).unwrap();
        let mdp = game.joint_mdp().unwrap();
        assert_abs_diff_eq!(v, evaluate_policy(&mdp, &mu, &xi).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn irrelevant_min_player() {
        // rewards and transitions ignore a2
        let p = Array5::from_shape_fn((3, 2, 2, 3, 2), |(h, s, a1, _, x)| {
            let stay = 0.2 + 0.1 * ((h + s + a1) % 5) as f64;
            if x == s { stay } else { 1.0 - stay }
        });
        let r = Array4::from_shape_fn((3, 2, 2, 3), |(h, s, a1, _)| 0.05 * (1 + h + 2 * s + a1) as f64);
        let game = ZeroSumGame::new(p, r).unwrap();
        let mu = Policy::mixed(Array3::from_elem((3, 2, 2), 0.5)).unwrap();
        let xi = InitDist::uniform(2);
        let (_, v) = best_response(&game, &mu, &xi).unwrap();
        let any_nu = Policy::product(
            Array3::from_elem((3, 2, 2), 0.5),
            Array3::from_elem((3, 2, 3), 1.0 / 3.0),
        )
        .unwrap();
        assert_abs_diff_eq!(v, evaluate_game_policy(&game, &any_nu, &xi).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn equilibrium_value_against_best_response() {
        let p = Array5::from_shape_fn((2, 2, 2, 2, 2), |(h, s, a1, a2, x)| {
            let q = [0.3, 0.6, 0.8, 0.1][(a1 * 2 + a2 + h + s) % 4];
            if x == 0 { q } else { 1.0 - q }
        });
        let r = Array4::from_shape_fn((2, 2, 2, 2), |(h, s, a1, a2)| {
            [0.9, 0.2, 0.4, 0.6][(a1 * 2 + a2 + 3 * h + s) % 4]
        });
        let game = ZeroSumGame::new(p, r).unwrap();
        let sol = solve_game(&game, 1e-9).unwrap();
        let xi = InitDist::uniform(2);
        let (_, br) = best_response(&game, &sol.policy, &xi).unwrap();
        assert_abs_diff_eq!(br, sol.value(&xi), epsilon = 1e-9);
        assert_abs_diff_eq!(
            evaluate_game_policy(&game, &sol.policy, &xi).unwrap(),
            sol.value(&xi),
            epsilon = 1e-9
        );
    }
}
