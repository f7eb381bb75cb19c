mod common;

use common::{exact_model, random_mixed_policy};
use hetpevi_core::data::{two_fold_subsample, ActionSpace};
use hetpevi_core::seed::rng;
use hetpevi_core::source_gen::{random_game, random_mdp};
use hetpevi_core::*;
use ndarray::s;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..4, 1usize..4, any::<u64>())
}

fn value_and_dist() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..5.0, n),
            prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], n),
        )
            .prop_filter_map("all-zero weights", |(v, w)| {
                let t: f64 = w.iter().sum();
                (t > 0.0).then(|| (v, w.iter().map(|x| x / t).collect()))
            })
    })
}

fn datasets(mdp: &EpisodicMdp, l: usize, k: usize, seed: u64) -> Vec<SourceDataset> {
    let d = mdp.dims();
    let sources = generate_sources(mdp, l, &GeneratorConfig::default(), seed).unwrap();
    let behavior = Policy::uniform(d.horizon, d.states, d.actions);
    let xi = InitDist::uniform(d.states);
    sources
        .iter()
        .enumerate()
        .map(|(i, src)| sample_dataset(src, &behavior, &xi, k, seed ^ i as u64, i).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_dual_is_sandwiched((v, p) in value_and_dist(), sigma in 1e-4f64..20.0) {
        let x = kl_dual_inf(&v, &p, sigma).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let nominal: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
        prop_assert!(lo - 1e-9 <= x && x <= nominal + 1e-9, "{lo} ≤ {x} ≤ {nominal}");
    }

    #[test]
    fn kl_dual_is_monotone_in_radius((v, p) in value_and_dist(), a in 1e-3f64..5.0, b in 1e-3f64..5.0) {
        let (small, large) = (a.min(b), a.max(b));
        let x = kl_dual_inf(&v, &p, small).unwrap();
        let y = kl_dual_inf(&v, &p, large).unwrap();
        prop_assert!(y <= x + 1e-7, "σ={small}: {x}, σ={large}: {y}");
    }

    #[test]
    fn occupancy_identity((h, st, a, seed) in dims()) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        let pi = random_mixed_policy(&mut rng(seed ^ 1), h, st, a);
        let xi = InitDist::new(common::random_simplex(&mut rng(seed ^ 2), st).into()).unwrap();
        let occ = occupancy(&mdp, &pi, &xi).unwrap();
        let probs = pi.probabilities(a).unwrap();
        let mut total = 0.0;
        for hh in 0..h {
            prop_assert!((occ.state.row(hh).sum() - 1.0).abs() < 1e-8);
            for ss in 0..st {
                for aa in 0..a {
                    let dsa = occ.state_action[[hh, ss, aa]];
                    prop_assert!((dsa - occ.state[[hh, ss]] * probs[[hh, ss, aa]]).abs() < 1e-12);
                    total += dsa * mdp.reward(hh, ss, aa);
                }
            }
        }
        prop_assert!((total - evaluate_policy(&mdp, &pi, &xi).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn gap_is_non_negative_and_robust_value_below_nominal((h, st, a, seed) in dims(), sigma in 0.01f64..2.0) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        let pi = random_mixed_policy(&mut rng(seed ^ 3), h, st, a);
        let xi = InitDist::uniform(st);
        prop_assert!(gap(&mdp, &pi, &xi).unwrap() >= -1e-9);
        let (star, _) = optimal_policy(&mdp);
        prop_assert!(gap(&mdp, &star, &xi).unwrap().abs() < 1e-9);
        let spec = RobustSpec::new(mdp.clone(), sigma).unwrap();
        prop_assert!(robust_policy_value(&spec, &pi, &xi).unwrap() <= evaluate_policy(&mdp, &pi, &xi).unwrap() + 1e-9);
        prop_assert!(r_gap(&spec, &pi, &xi).unwrap() >= -1e-7);
    }

    #[test]
    fn ne_is_unexploitable(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = ndarray::Array2::from_shape_fn((m, n), |_| rand::Rng::random::<f64>(&mut r) * 4.0 - 1.0);
        let sol = ne_matrix_game(a.view(), 1e-9).unwrap();
        let (row_gain, col_gain) = sol.exploitability(a.view());
        prop_assert!(row_gain <= 1e-6 && col_gain <= 1e-6, "{row_gain}, {col_gain}");
    }

    #[test]
    fn subsample_never_exceeds_main_half(
        (h, st, a, seed) in dims(), k in 2usize..60, trim in prop_oneof![Just(0.0), 0.0f64..2.0],
    ) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        let ds = datasets(&mdp, 1, k, seed).remove(0);
        let out = two_fold_subsample(&ds, 0.1, 3, trim, seed).unwrap();
        // rebuild the main half from the same shuffle
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng(seed));
        let main: Vec<usize> = order[k / 2..].to_vec();
        let mut main_counts = ndarray::Array3::<u64>::zeros((h, st, a));
        for &i in &main {
            for (hh, step) in ds.trajectories[i].iter().enumerate() {
                main_counts[[hh, step.state, step.action]] += 1;
            }
        }
        let kept = count_visits(&out);
        for (x, y) in kept.visits.iter().zip(main_counts.iter()) {
            prop_assert!(x <= y);
        }
        // every emitted sample is a real transition of the input
        for t in &out.samples {
            let found = main.iter().any(|&i| {
                let x = &ds.trajectories[i][t.step];
                (x.state, x.action, x.reward, x.next_state) == (t.state, t.action, t.reward, t.next_state)
            });
            prop_assert!(found);
        }
    }

    #[test]
    fn aggregation_is_mean_over_active_sources((h, st, a, seed) in dims(), l in 1usize..5, k in 1usize..8) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        let counts: Vec<VisitCounts> = datasets(&mdp, l, k, seed).iter().map(count_visits).collect();
        let model = aggregate_model(&counts).unwrap();
        for hh in 0..h {
            for ss in 0..st {
                for aa in 0..a {
                    let active: Vec<&VisitCounts> = counts.iter().filter(|c| c.visits[[hh, ss, aa]] > 0).collect();
                    prop_assert_eq!(model.active[[hh, ss, aa]], active.len());
                    let row = model.row(hh, ss, aa);
                    if active.is_empty() {
                        prop_assert_eq!(model.rewards[[hh, ss, aa]], 0.0);
                        prop_assert!(row.iter().all(|x| (x - 1.0 / st as f64).abs() < 1e-12));
                        continue;
                    }
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    let n = active.len() as f64;
                    let r: f64 = active.iter().map(|c| c.reward_sum[[hh, ss, aa]] / c.visits[[hh, ss, aa]] as f64).sum::<f64>() / n;
                    prop_assert!((model.rewards[[hh, ss, aa]] - r).abs() < 1e-12);
                    for x in 0..st {
                        let p: f64 = active
                            .iter()
                            .map(|c| c.transitions[[hh, ss, aa, x]] as f64 / c.visits[[hh, ss, aa]] as f64)
                            .sum::<f64>() / n;
                        prop_assert!((row[x] - p).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn count_conservation((h, st, a, seed) in dims(), k in 1usize..20) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        let ds = datasets(&mdp, 1, k, seed).remove(0);
        let c = count_visits(&ds);
        for hh in 0..h {
            prop_assert_eq!(c.visits.slice(s![hh, .., ..]).sum(), k as u64);
            for ss in 0..st {
                for aa in 0..a {
                    prop_assert_eq!(c.transitions.slice(s![hh, ss, aa, ..]).sum(), c.visits[[hh, ss, aa]]);
                }
            }
        }
    }

    #[test]
    fn penalty_is_monotone(
        visits in prop::collection::vec(1u64..500, 1..10), bump in 0usize..10,
        c in 0.01f64..3.0, horizon in 1usize..10,
    ) {
        let cfg = PenaltyConfig::new(c, 0.05);
        let lf = cfg.log_factor(3, 3, horizon);
        let base = penalty_gamma(&visits, horizon, lf, &cfg);
        let mut more = visits.clone();
        more[bump % visits.len()] += 1;
        prop_assert!(penalty_gamma(&more, horizon, lf, &cfg).alpha < base.alpha);
        let mut wider = visits.clone();
        wider.push(visits[0]);
        prop_assert!(penalty_gamma(&wider, horizon, lf, &cfg).beta < base.beta);
        prop_assert!(base.total <= horizon as f64);
    }

    #[test]
    fn solver_values_stay_in_range((h, st, a, seed) in dims(), l in 1usize..4, k in 1usize..30, c in 0.0f64..1.0) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        let counts: Vec<VisitCounts> = datasets(&mdp, l, k, seed).iter().map(count_visits).collect();
        let model = aggregate_model(&counts).unwrap();
        let cfg = if c == 0.0 { PenaltyConfig::zero() } else { PenaltyConfig::new(c, 0.05) };
        for out in [hetpevi(&model, &cfg).unwrap(), hetpevi_robust(&model, 0.3, &cfg).unwrap()] {
            for hh in 0..h {
                let cap = (h - hh) as f64 + 1e-9;
                prop_assert!(out.values.row(hh).iter().all(|&v| (0.0..=cap).contains(&v)));
                prop_assert!(out.q.slice(s![hh, .., ..]).iter().all(|&q| (0.0..=cap).contains(&q)));
            }
            prop_assert!(out.penalty.iter().all(|&g| g <= h as f64));
        }
    }

    #[test]
    fn zero_penalty_on_exact_model_is_value_iteration((h, st, a, seed) in dims()) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        let out = hetpevi(&exact_model(&mdp, ActionSpace::Single(a)), &PenaltyConfig::zero()).unwrap();
        let (star, tables) = optimal_policy(&mdp);
        prop_assert_eq!(out.policy, star);
        prop_assert_eq!(out.values, tables.v);
    }

    #[test]
    fn avg_pevi_rows_are_distributions(actions in prop::collection::vec(0usize..4, 1..9)) {
        let policies: Vec<Policy> = actions.iter().map(|&x| Policy::constant(2, 2, x)).collect();
        let mixed = avg_pevi(&policies, 4).unwrap();
        let probs = mixed.probabilities(4).unwrap();
        for x in 0..4 {
            let share = actions.iter().filter(|&&y| y == x).count() as f64 / actions.len() as f64;
            prop_assert!((probs[[1, 0, x]] - share).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic((h, st, a, seed) in dims(), k in 1usize..20) {
        let mdp = random_mdp(h, st, a, seed).unwrap();
        prop_assert_eq!(datasets(&mdp, 2, k, seed), datasets(&mdp, 2, k, seed));
    }

    #[test]
    fn game_solver_values_stay_in_range(seed in any::<u64>(), k in 1usize..40) {
        let game = random_game(3, 2, 2, 2, seed).unwrap();
        let behavior = Policy::uniform(3, 2, 4);
        let ds = sample_game_dataset(&game, &behavior, &InitDist::uniform(2), k, seed, 0).unwrap();
        let model = aggregate_model(&[count_visits(&ds)]).unwrap();
        let out = hetpevi_game(&model, 2, 2, &PenaltyConfig::new(0.3, 0.05)).unwrap();
        for hh in 0..3 {
            prop_assert!(out.values.row(hh).iter().all(|&v| v >= -1e-12 && v <= (3 - hh) as f64 + 1e-9));
        }
    }
}
