//! Tabular offline reinforcement learning from several randomly perturbed
//! data sources.
//!
//! The crate covers exact ground truth (dynamic programming, matrix-game
//! equilibria, KL-robust evaluation), source and dataset generation,
//! pessimistic value iteration over aggregated source models, coverage
//! diagnostics, and a seeded experiment harness.

pub mod data;
pub mod diagnostics;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod game;
pub mod io;
pub mod matrix_game;
pub mod model;
pub mod robust;
pub mod seed;
pub mod solvers;
pub mod source_gen;

pub use data::{
    aggregate_model, count_visits, sample_dataset, sample_game_dataset, two_fold_subsample, ActionSpace,
    AggregatedModel, SourceDataset, SubsampleConfig, TransitionSet, VisitCounts,
};
pub use diagnostics::{
    coverage_params, coverage_params_game, coverage_params_robust, coverage_sets, coverage_sets_game, gap, mg_gap,
    r_gap, CoverageReport, CoverageSets,
};
pub use dp::{evaluate_policy, occupancy, optimal_policy, ValueTables};
pub use error::{Error, Result};
pub use experiment::{
    builtin_fig2_target, run_experiment, run_lower_bound, Algorithm, ExperimentConfig, ResultRecord, Setting,
};
pub use game::{best_response, solve_game};
pub use io::Instance;
pub use matrix_game::{ne_matrix_game, MatrixGameSolution};
pub use model::{Dims, EpisodicMdp, InitDist, OccupancyTables, Policy, RobustSpec, ZeroSumGame};
pub use robust::{kl_dual_inf, robust_optimal_policy, robust_policy_value};
pub use solvers::{
    avg_pevi, hetpevi, hetpevi_game, hetpevi_robust, penalty_gamma, pevi_pooled, pevi_single, PenaltyConfig,
    SolverOutput, VarianceMode,
};
pub use source_gen::{
    build_hard_instance, generate_bounded_sources, generate_sources, BoundedGeneratorConfig, GeneratorConfig,
    HardInstance, Regime,
};
