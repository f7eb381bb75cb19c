#![allow(dead_code)]

use hetpevi_core::data::ActionSpace;
use hetpevi_core::{AggregatedModel, Dims, EpisodicMdp, InitDist, Policy};
use ndarray::{Array3, Array4, Array5};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi / pi).ln())
        .sum()
}

/// Points of the `m`-simplex on a grid of `1/n`, restricted to a box given in
/// grid units.
fn for_each_grid_point(n: i64, lo: &[i64], hi: &[i64], f: &mut impl FnMut(&[i64])) {
    fn rec(i: usize, left: i64, cur: &mut Vec<i64>, lo: &[i64], hi: &[i64], f: &mut impl FnMut(&[i64])) {
        let m = lo.len();
        if i == m - 1 {
            if left >= lo[i] && left <= hi[i] {
                cur.push(left);
                f(cur);
                cur.pop();
            }
            return;
        }
        for k in lo[i].max(0)..=hi[i].min(left) {
            cur.push(k);
            rec(i + 1, left - k, cur, lo, hi, f);
            cur.pop();
        }
    }
    rec(0, n, &mut Vec::new(), lo, hi, f);
}

/// `min q·V` over `KL(q‖p) ≤ σ` by brute force: a 1e-2 grid over the whole
/// simplex, then 1e-3 and 1e-4 grids in windows that re-center on the best
/// feasible point until it stops moving. Coordinates outside the support of
/// `p` stay at zero.
pub fn grid_kl_inf(values: &[f64], p: &[f64], sigma: f64) -> f64 {
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 1e-15).collect();
    let ps: Vec<f64> = support.iter().map(|&i| p[i]).collect();
    let vs: Vec<f64> = support.iter().map(|&i| values[i]).collect();
    let m = support.len();
    let mut best_q = ps.clone();
    let mut best = ps.iter().zip(&vs).map(|(a, b)| a * b).sum::<f64>();
    if m == 1 {
        return best;
    }
    let stages: &[(i64, f64)] = if m == 2 {
        &[(10_000, 1.0)]
    } else {
        &[(100, 1.0), (1000, 0.03), (10_000, 0.003)]
    };
    for &(n, window) in stages {
        let nf = n as f64;
        loop {
            let start = best;
            let lo: Vec<i64> = best_q.iter().map(|q| ((q - window) * nf).floor() as i64).collect();
            let hi: Vec<i64> = best_q.iter().map(|q| ((q + window) * nf).ceil() as i64).collect();
            let mut q = vec![0.0; m];
            for_each_grid_point(n, &lo, &hi, &mut |k| {
                for (qi, ki) in q.iter_mut().zip(k) {
                    *qi = *ki as f64 / nf;
                }
                let val: f64 = q.iter().zip(&vs).map(|(a, b)| a * b).sum();
                if val < best && kl(&q, &ps) <= sigma {
                    best = val;
                    best_q.copy_from_slice(&q);
                }
            });
            if window >= 1.0 || best >= start {
                break;
            }
        }
    }
    best
}

/// Single-source aggregate that carries the exact model of `mdp`.
pub fn exact_model(mdp: &EpisodicMdp, actions: ActionSpace) -> AggregatedModel {
    let d = mdp.dims();
    let (h, s, a) = (d.horizon, d.states, d.actions);
    AggregatedModel {
        dims: Dims {
            horizon: h,
            states: s,
            actions: a,
        },
        actions,
        rewards: mdp.rewards().clone(),
        transitions: mdp.transitions().clone(),
        active: Array3::ones((h, s, a)),
        source_visits: Array4::ones((1, h, s, a)),
        source_rewards: mdp.rewards().clone().insert_axis(ndarray::Axis(0)),
        source_transitions: Array5::from_shape_fn((1, h, s, a, s), |(_, hh, ss, aa, x)| {
            mdp.transition(hh, ss, aa, x)
        }),
    }
}

/// Inverse-CDF draw from a probability row.
pub fn draw(rng: &mut ChaCha8Rng, row: impl IntoIterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in row.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Monte-Carlo rollouts: per-episode returns and `(h, s, a)` visit counts.
pub fn rollouts(mdp: &EpisodicMdp, policy: &Policy, xi: &InitDist, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Array3<u64>) {
    let d = mdp.dims();
    let probs = policy.probabilities(d.actions).unwrap();
    let mut visits = Array3::zeros((d.horizon, d.states, d.actions));
    let returns = (0..n)
        .map(|_| {
            let mut s = draw(rng, xi.probs().iter().copied());
            let mut total = 0.0;
            for h in 0..d.horizon {
                let a = draw(rng, probs.slice(ndarray::s![h, s, ..]).iter().copied());
                visits[[h, s, a]] += 1;
                total += mdp.reward(h, s, a);
                s = draw(rng, (0..d.states).map(|x| mdp.transition(h, s, a, x)));
            }
            total
        })
        .collect();
    (returns, visits)
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Uniformly random point of the simplex.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|x| x / t).collect()
}

pub fn random_mixed_policy(rng: &mut ChaCha8Rng, h: usize, s: usize, a: usize) -> Policy {
    let mut probs = Array3::zeros((h, s, a));
    for hh in 0..h {
        for ss in 0..s {
            for (aa, p) in random_simplex(rng, a).into_iter().enumerate() {
                probs[[hh, ss, aa]] = p;
            }
        }
    }
    Policy::mixed(probs).unwrap()
}
