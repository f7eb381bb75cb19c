mod common;

use common::mean_se;
use hetpevi_core::data::{trim_budget, SourceDataset};
use hetpevi_core::seed::rng;
use hetpevi_core::source_gen::{random_game, random_mdp};
use hetpevi_core::*;
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;

#[test]
fn fig2_behavior_frequency() {
    let (mdp, behavior, xi) = builtin_fig2_target();
    let ds = sample_dataset(&mdp, &behavior, &xi, 5000, 1, 0).unwrap();
    let hits: Vec<f64> = ds
        .trajectories
        .iter()
        .flatten()
        .map(|st| f64::from(u8::from(st.action == 0)))
        .collect();
    assert_eq!(hits.len(), 100_000);
    let (m, se) = mean_se(&hits);
    assert!((m - 0.2).abs() < 3.0 * se, "{m}");
}

#[test]
fn game_dataset_flattens_joint_actions() {
    let game = random_game(3, 2, 2, 3, 4).unwrap();
    let mu = Array3::from_shape_fn((3, 2, 2), |(_, _, a)| [0.9, 0.1][a]);
    let nu = Array3::from_shape_fn((3, 2, 3), |(_, _, b)| [0.2, 0.3, 0.5][b]);
    let behavior = Policy::product(mu, nu).unwrap();
    let ds = sample_game_dataset(&game, &behavior, &InitDist::uniform(2), 4000, 2, 0).unwrap();
    assert_eq!(ds.actions, ActionSpace::Joint(2, 3));
    let steps: Vec<_> = ds.trajectories.iter().flatten().collect();
    for (joint, p) in [(0, 0.18), (2, 0.45), (4, 0.03), (5, 0.05)] {
        let xs: Vec<f64> = steps.iter().map(|st| f64::from(u8::from(st.action == joint))).collect();
        let (m, se) = mean_se(&xs);
        assert!((m - p).abs() < 4.0 * se, "joint {joint}: {m} vs {p}");
    }
}

/// Split the shuffled trajectories, budget from the first half, keep the
/// first `budget` hits of each tuple in the second half (index order).
fn oracle_subsample(ds: &SourceDataset, delta: f64, l: usize, t: f64, seed: u64) -> (Array3<u64>, Array3<u64>, Array3<u64>) {
    let d = ds.dims();
    let k = ds.num_trajectories();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng(seed));
    let shape = (d.horizon, d.states, d.actions);
    let (mut aux, mut main) = (Array3::<u64>::zeros(shape), Array3::<u64>::zeros(shape));
    for (pos, &i) in order.iter().enumerate() {
        let half = if pos < k / 2 { &mut aux } else { &mut main };
        for (h, st) in ds.trajectories[i].iter().enumerate() {
            half[[h, st.state, st.action]] += 1;
        }
    }
    let log_term = ((k * d.horizon * l) as f64 / delta).ln();
    let kept = Array3::from_shape_fn(shape, |idx| {
        let n = aux[idx] as f64;
        let budget = (n - t * (n * log_term).sqrt()).max(0.0).floor() as u64;
        budget.min(main[idx])
    });
    (aux, main, kept)
}

#[test]
fn subsample_matches_direct_construction() {
    let mdp = random_mdp(4, 3, 2, 3).unwrap();
    let ds = sample_dataset(&mdp, &Policy::uniform(4, 3, 2), &InitDist::uniform(3), 400, 5, 0).unwrap();
    let all = count_visits(&ds).visits;
    for t in [0.0, 0.3, 1.0, 10.0] {
        let out = two_fold_subsample(&ds, 0.05, 3, t, 17).unwrap();
        let (aux, main, kept) = oracle_subsample(&ds, 0.05, 3, t, 17);
        assert_eq!(&aux + &main, all);
        assert_eq!(count_visits(&out).visits, kept, "T = {t}");
    }
}

#[test]
fn subsample_budget_on_binomial_counts() {
    // one step, one state, two equally likely actions: the auxiliary count of
    // each action is Binomial(500, 1/2)
    let p = Array4::from_elem((1, 1, 2, 1), 1.0);
    let mdp = EpisodicMdp::new(p, Array3::from_elem((1, 1, 2), 0.5)).unwrap();
    let log_term = (1000.0f64 / 0.01).ln();
    let expected = 250.0 - (250.0 * log_term).sqrt();
    let sd = 500f64.sqrt() / 2.0;
    let mut kept = Vec::new();
    for seed in 0..40 {
        let ds = sample_dataset(&mdp, &Policy::uniform(1, 1, 2), &InitDist::uniform(1), 1000, seed, 0).unwrap();
        assert!(two_fold_subsample(&ds, 0.01, 1, 10.0, seed).unwrap().samples.is_empty());
        let counts = count_visits(&two_fold_subsample(&ds, 0.01, 1, 1.0, seed).unwrap()).visits;
        for a in 0..2 {
            assert!((counts[[0, 0, a]] as f64 - expected).abs() <= 2.0 * sd, "{}", counts[[0, 0, a]]);
            kept.push(counts[[0, 0, a]] as f64);
        }
    }
    // the budget is concave in the count, so the average sits just below
    let (m, se) = mean_se(&kept);
    assert!(m <= expected + 3.0 * se && m >= expected - 2.0 - 3.0 * se, "{m} vs {expected}");
    assert_eq!(trim_budget(250, log_term, 1.0), expected.floor() as u64);
}

#[test]
fn single_source_aggregate_is_empirical_model() {
    let mdp = random_mdp(3, 3, 2, 8).unwrap();
    let ds = sample_dataset(&mdp, &Policy::uniform(3, 3, 2), &InitDist::uniform(3), 60, 9, 0).unwrap();
    let model = aggregate_model(&[count_visits(&ds)]).unwrap();
    let mut n = Array3::<f64>::zeros((3, 3, 2));
    let mut r = Array3::<f64>::zeros((3, 3, 2));
    let mut p = Array4::<f64>::zeros((3, 3, 2, 3));
    for traj in &ds.trajectories {
        for (h, st) in traj.iter().enumerate() {
            n[[h, st.state, st.action]] += 1.0;
            r[[h, st.state, st.action]] += st.reward;
            p[[h, st.state, st.action, st.next_state]] += 1.0;
        }
    }
    for ((h, s, a), &cnt) in n.indexed_iter() {
        if cnt == 0.0 {
            assert_eq!(model.active[[h, s, a]], 0);
            continue;
        }
        assert_eq!(model.active[[h, s, a]], 1);
        assert!((model.rewards[[h, s, a]] - r[[h, s, a]] / cnt).abs() < 1e-12);
        for x in 0..3 {
            assert!((model.transitions[[h, s, a, x]] - p[[h, s, a, x]] / cnt).abs() < 1e-12);
        }
    }
}

#[test]
fn unvisited_tuples_get_sentinel() {
    let mdp = random_mdp(2, 3, 3, 1).unwrap();
    let only_zero = Policy::constant(2, 3, 0);
    let ds = sample_dataset(&mdp, &only_zero, &InitDist::uniform(3), 30, 2, 0).unwrap();
    let model = aggregate_model(&[count_visits(&ds)]).unwrap();
    for h in 0..2 {
        for s in 0..3 {
            for a in 1..3 {
                assert_eq!(model.active[[h, s, a]], 0);
                assert_eq!(model.rewards[[h, s, a]], 0.0);
                assert!(model.row(h, s, a).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
                assert_eq!(model.p_min(h, s, a), None);
            }
        }
    }
}

#[test]
fn empirical_model_converges() {
    let mdp = random_mdp(2, 2, 2, 6).unwrap();
    let ds = sample_dataset(&mdp, &Policy::uniform(2, 2, 2), &InitDist::uniform(2), 20_000, 3, 0).unwrap();
    let model = aggregate_model(&[count_visits(&ds)]).unwrap();
    for ((h, s, a, x), &p) in mdp.transitions().indexed_iter() {
        let n = model.source_visits[[0, h, s, a]] as f64;
        let se = (p * (1.0 - p) / n).sqrt().max(1e-9);
        assert!((model.transitions[[h, s, a, x]] - p).abs() < 4.0 * se + 1e-12);
    }
}
