use hetpevi_core::experiment::{
    builtin_fig2_reversed, read_records, summarize, write_outputs, write_records, LowerBoundConfig, TargetSpec,
};
use hetpevi_core::*;

fn small_mdp() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::fig2();
    cfg.target = TargetSpec::Random {
        horizon: 3,
        states: 3,
        actions: 2,
        min_actions: None,
        seed: 4,
    };
    cfg.k_list = vec![20, 50];
    cfg.l_list = vec![1, 4];
    cfg.replications = 3;
    cfg.algorithms = vec![Algorithm::Hetpevi, Algorithm::AvgPevi, Algorithm::PeviPooled];
    cfg.penalty = PenaltyConfig::new(0.05, 0.05);
    cfg
}

#[test]
fn record_count_and_order() {
    let cfg = small_mdp();
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), cfg.num_records());
    assert_eq!(records.len(), 2 * 2 * 3 * 3);
    let keys: Vec<_> = records.iter().map(|r| (r.k, r.l, r.rep)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(records.iter().all(|r| r.gap >= -1e-9 && r.elapsed_ms == 0 && r.setting == "mdp"));
}

#[test]
fn reruns_are_identical_and_seed_sensitive() {
    let cfg = small_mdp();
    let a = run_experiment(&cfg).unwrap();
    assert_eq!(a, run_experiment(&cfg).unwrap());
    let mut other = cfg.clone();
    other.base_seed += 1;
    let b = run_experiment(&other).unwrap();
    assert_ne!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), b.iter().map(|r| r.seed).collect::<Vec<_>>());
}

#[test]
fn cells_do_not_depend_on_the_grid() {
    // a cell's result depends only on (base_seed, K, L, rep)
    let cfg = small_mdp();
    let full = run_experiment(&cfg).unwrap();
    let mut one = cfg.clone();
    one.k_list = vec![50];
    one.l_list = vec![4];
    let part = run_experiment(&one).unwrap();
    let matching: Vec<_> = full.iter().filter(|r| r.k == 50 && r.l == 4).cloned().collect();
    assert_eq!(part, matching);
}

#[test]
fn game_and_robust_settings_run() {
    let mut game = small_mdp();
    game.setting = Setting::Game;
    game.target = TargetSpec::Random {
        horizon: 2,
        states: 2,
        actions: 2,
        min_actions: Some(2),
        seed: 1,
    };
    let records = run_experiment(&game).unwrap();
    assert!(records.iter().all(|r| r.setting == "game" && r.gap >= -1e-7));

    let mut robust = small_mdp();
    robust.setting = Setting::Robust;
    robust.robust = Some(experiment::RobustConfig {
        sigma: 0.1,
        lower: 0.25,
        upper: 4.0,
        max_attempts: 10_000,
    });
    let records = run_experiment(&robust).unwrap();
    assert!(records.iter().all(|r| r.setting == "robust" && r.gap >= -1e-9));
}

#[test]
fn lower_bound_targets_are_symmetric() {
    // relabeling the two informative actions maps one target onto the other;
    // the same driving draws give the same gap distribution up to that swap
    let mut cfg = ExperimentConfig::fig2();
    cfg.setting = Setting::LowerBound;
    cfg.k_list = vec![200];
    cfg.l_list = vec![2, 8];
    cfg.replications = 30;
    cfg.algorithms = vec![Algorithm::Hetpevi];
    cfg.penalty = PenaltyConfig::new(0.5, 0.05);
    cfg.lower_bound = Some(LowerBoundConfig {
        horizon: 8,
        states: 2,
        coverage: 2.0,
        epsilon: 0.1,
        regime: Regime::SourceLimited,
        bad_sources: 0,
    });
    let (records, report) = run_lower_bound(&cfg).unwrap();
    assert_eq!(records.len(), cfg.num_records());
    assert_eq!(report.cells.len(), 2);
    for cell in &report.cells {
        assert_eq!(cell.max_mean_gap, cell.mean_gap[0].max(cell.mean_gap[1]));
        assert_eq!(cell.not_learned, cell.max_mean_gap >= 0.1);
        for phi in 0..2 {
            assert!(cell.mean_gap[phi] >= 0.0 && cell.mean_gap[phi] <= report.params.separation + 1e-9);
        }
    }
    let hi = build_hard_instance(8, 2, 2.0, 0.1, Regime::SourceLimited).unwrap();
    let swap = |m: &EpisodicMdp| {
        let mut p = m.transitions().clone();
        for x in 0..2 {
            p.swap([0, 0, 0, x], [0, 0, 1, x]);
        }
        p
    };
    assert_eq!(swap(&hi.targets[0]), hi.targets[1].transitions());
    assert_eq!(swap(&hi.sources[0]), hi.sources[1].transitions());
}

#[test]
fn fig2_builtins() {
    let (m, b, xi) = builtin_fig2_target();
    let (rm, rb, rxi) = builtin_fig2_reversed();
    assert_eq!(xi, rxi);
    let (star, _) = optimal_policy(&m);
    let (rstar, _) = optimal_policy(&rm);
    for h in 0..20 {
        assert_eq!(star.action(h, 0), Some(0));
        assert_eq!(rstar.action(h, 0), Some(19));
    }
    let v = evaluate_policy(&m, &star, &xi).unwrap();
    assert!((v - evaluate_policy(&rm, &rstar, &xi).unwrap()).abs() < 1e-12);
    let u = Policy::uniform(20, 2, 20);
    assert!((evaluate_policy(&m, &b, &xi).unwrap() - evaluate_policy(&rm, &rb, &xi).unwrap()).abs() < 1e-12);
    assert!(gap(&m, &u, &xi).unwrap() > 0.5);
}

#[test]
fn csv_round_trip_and_sidecars() {
    let cfg = small_mdp();
    let records = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let coverage = experiment::coverage_sidecar(&cfg).unwrap();
    assert_eq!(coverage.iter().map(|c| c.l).collect::<Vec<_>>(), vec![1, 4]);
    let files = write_outputs(dir.path(), "t", &cfg, &records, &coverage).unwrap();
    assert_eq!(files.csv.file_name().unwrap(), "mdp_t.csv");
    assert_eq!(read_records(&files.csv).unwrap(), records);
    let saved: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&files.config).unwrap()).unwrap();
    assert_eq!(saved, cfg);

    let empty = dir.path().join("empty.csv");
    write_records(&empty, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(&empty).unwrap().trim(), "setting,algorithm,K,L,rep,gap,elapsed_ms,seed");

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert!(read_records(&bad).is_err());
}

#[test]
fn summaries_group_by_cell() {
    let records = run_experiment(&small_mdp()).unwrap();
    let summary = summarize(&records);
    assert_eq!(summary.len(), 2 * 2 * 3);
    for s in &summary {
        let gaps: Vec<f64> = records
            .iter()
            .filter(|r| r.algorithm == s.algorithm && r.k == s.k && r.l == s.l)
            .map(|r| r.gap)
            .collect();
        assert_eq!(s.n, gaps.len());
        assert!((s.mean - gaps.iter().sum::<f64>() / gaps.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn timing_is_opt_in() {
    let mut cfg = small_mdp();
    cfg.record_timing = true;
    cfg.k_list = vec![20];
    assert_eq!(run_experiment(&cfg).unwrap().len(), cfg.num_records());
}
