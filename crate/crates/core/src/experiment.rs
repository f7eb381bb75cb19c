//! Experiment harness: configuration, `(K, L)` sweeps with replications,
//! lower-bound demonstrations and CSV output.
//!
//! Every cell `(K, L, rep)` draws from streams derived from
//! `mix(base_seed, [K, L, rep])`, so results do not depend on scheduling.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    aggregate_model, count_visits, sample_dataset, sample_game_dataset, AggregatedModel, SubsampleConfig, VisitCounts,
};
use crate::diagnostics::{
    coverage_params, coverage_params_game, coverage_params_robust, coverage_sets, coverage_sets_game, gap, mg_gap,
    r_gap, CoverageReport,
};
use crate::error::{Error, Result};
use crate::io::Instance;
use crate::model::{EpisodicMdp, InitDist, Policy, RobustSpec, ZeroSumGame};
use crate::seed::mix;
use crate::solvers::{avg_pevi, hetpevi, hetpevi_game, hetpevi_robust, PenaltyConfig, SolverOutput};
use crate::source_gen::{
    build_hard_instance, generate_bounded_sources, generate_game_sources, generate_sources, random_game, random_mdp,
    BoundedGeneratorConfig, GeneratorConfig, HardInstance, HardInstanceParams, Regime,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Mdp,
    Game,
    Robust,
    LowerBound,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Mdp => "mdp",
            Setting::Game => "game",
            Setting::Robust => "robust",
            Setting::LowerBound => "lower_bound",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Hetpevi,
    /// Uniform mixture of per-source PEVI policies.
    AvgPevi,
    /// PEVI on all sources merged into one dataset (ablation).
    PeviPooled,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Hetpevi => "hetpevi",
            Algorithm::AvgPevi => "avg_pevi",
            Algorithm::PeviPooled => "pevi_pooled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    /// Built-in instance: `"fig2"` or `"fig2_reversed"`.
    Builtin(String),
    /// Instance file (see [`crate::io`]).
    Path(PathBuf),
    /// Random instance; `min_actions` makes it a game.
    Random {
        horizon: usize,
        states: usize,
        actions: usize,
        #[serde(default)]
        min_actions: Option<usize>,
        seed: u64,
    },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Builtin("fig2".into())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorSpec {
    /// The built-in target's behavior policy, uniform otherwise.
    #[default]
    Default,
    Uniform,
    /// JSON-serialized [`Policy`].
    Path(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_attempts() -> usize {
    10_000
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundConfig {
    pub horizon: usize,
    pub states: usize,
    pub coverage: f64,
    pub epsilon: f64,
    pub regime: Regime,
    /// Extra sources that always play the uncovering action.
    #[serde(default)]
    pub bad_sources: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub setting: Setting,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub behavior: BehaviorSpec,
    pub k_list: Vec<usize>,
    /// Number of sources per cell; the number of good sources for `lower_bound`.
    pub l_list: Vec<usize>,
    pub replications: usize,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub subsample: SubsampleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<RobustConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<LowerBoundConfig>,
    /// Fill `elapsed_ms`; otherwise it is written as 0 so reruns are
    /// byte-identical.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// Defaults for the two-state, twenty-action sweep.
    pub fn fig2() -> Self {
        ExperimentConfig {
            base_seed: 2024,
            setting: Setting::Mdp,
            target: TargetSpec::default(),
            generator: GeneratorConfig::default(),
            behavior: BehaviorSpec::Default,
            k_list: vec![10, 100, 1000],
            l_list: vec![2, 5, 10, 20],
            replications: 100,
            algorithms: vec![Algorithm::Hetpevi, Algorithm::AvgPevi],
            penalty: PenaltyConfig::new(FIG2_C, 0.05),
            subsample: SubsampleConfig::passthrough(),
            robust: None,
            lower_bound: None,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(field, reason));
        if self.k_list.is_empty() {
            return bad("k_list", "must not be empty");
        }
        if self.l_list.is_empty() {
            return bad("l_list", "must not be empty");
        }
        if self.replications == 0 {
            return bad("replications", "must be at least 1");
        }
        if self.algorithms.is_empty() {
            return bad("algorithms", "must not be empty");
        }
        let min_k = if self.subsample.enabled { 2 } else { 1 };
        if self.k_list.iter().any(|&k| k < min_k) {
            return bad("k_list", "every K must be at least 1 (2 with subsampling)");
        }
        if self.l_list.contains(&0) {
            return bad("l_list", "every L must be at least 1");
        }
        let wrap = |field: &'static str, r: Result<()>| r.map_err(|e| Error::config(field, e.to_string()));
        wrap("penalty", self.penalty.validate())?;
        wrap("generator", self.generator.validate())?;
        wrap("subsample", self.subsample.validate())?;
        match self.setting {
            Setting::Robust => {
                let Some(r) = self.robust else {
                    return bad("robust", "required for the robust setting");
                };
                if r.sigma.is_nan() || r.sigma <= 0.0 {
                    return bad("robust.sigma", "must be positive");
                }
                wrap("robust", self.bounded(&r).validate())?;
            }
            Setting::LowerBound => {
                let Some(lb) = self.lower_bound else {
                    return bad("lower_bound", "required for the lower_bound setting");
                };
                wrap(
                    "lower_bound",
                    build_hard_instance(lb.horizon, lb.states, lb.coverage, lb.epsilon, lb.regime).map(|_| ()),
                )?;
            }
            Setting::Mdp | Setting::Game => {}
        }
        Ok(())
    }

    fn bounded(&self, r: &RobustConfig) -> BoundedGeneratorConfig {
        BoundedGeneratorConfig {
            base: self.generator,
            lower: r.lower,
            upper: r.upper,
            max_attempts: r.max_attempts,
        }
    }

    pub fn num_records(&self) -> usize {
        let per_cell = if self.setting == Setting::LowerBound { 2 } else { 1 };
        self.k_list.len() * self.l_list.len() * self.replications * self.algorithms.len() * per_cell
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Penalty scale used by the built-in sweep. With `c ≥ 0.05` the source
/// term `c·sqrt(H²·log(SAH/δ)/L̂)` zeroes every estimate on this instance
/// at the grid's `L`, and the solver falls back to tie-breaking.
pub const FIG2_C: f64 = 0.002;

/// Two states, twenty actions, horizon twenty. Index 0 is the rewarding
/// state and action: `r = 0.9` at `(0, 0)` and `0.1` elsewhere; `(0, 0)`
/// moves to state 0 with probability 0.9, every other pair with 0.5.
/// Behavior plays action 0 with probability 0.2, otherwise uniformly.
pub fn builtin_fig2_target() -> (EpisodicMdp, Policy, InitDist) {
    fig2_with_good_action(0)
}

/// The same instance with action labels reversed, so the rewarding action
/// is the last index. Lowest-index tie-breaking then no longer picks the
/// optimal action by default.
pub fn builtin_fig2_reversed() -> (EpisodicMdp, Policy, InitDist) {
    fig2_with_good_action(19)
}

fn fig2_with_good_action(good: usize) -> (EpisodicMdp, Policy, InitDist) {
    const H: usize = 20;
    const S: usize = 2;
    const A: usize = 20;
    let transitions = Array4::from_shape_fn((H, S, A, S), |(_, s, a, x)| {
        let stay = if (s, a) == (0, good) { 0.9 } else { 0.5 };
        if x == 0 {
            stay
        } else {
            1.0 - stay
        }
    });
    let rewards = Array3::from_shape_fn((H, S, A), |(_, s, a)| if (s, a) == (0, good) { 0.9 } else { 0.1 });
    let behavior = Array3::from_shape_fn((H, S, A), |(_, _, a)| if a == good { 0.2 } else { 0.8 / (A - 1) as f64 });
    (
        EpisodicMdp::new(transitions, rewards).expect("valid by construction"),
        Policy::mixed(behavior).expect("valid by construction"),
        InitDist::uniform(S),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub setting: String,
    pub algorithm: Algorithm,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub rep: usize,
    pub gap: f64,
    pub elapsed_ms: u64,
    pub seed: u64,
}

#[allow(clippy::large_enum_variant)]
enum Problem {
    Mdp {
        target: EpisodicMdp,
        behavior: Policy,
        xi: InitDist,
    },
    Game {
        target: ZeroSumGame,
        behavior: Policy,
        xi: InitDist,
    },
    Robust {
        spec: RobustSpec,
        behavior: Policy,
        xi: InitDist,
        bounded: BoundedGeneratorConfig,
    },
    LowerBound {
        instance: HardInstance,
        bad_sources: usize,
    },
}

fn load_target(spec: &TargetSpec) -> Result<(Instance, Option<Policy>, Option<InitDist>)> {
    match spec {
        TargetSpec::Builtin(name) if name == "fig2" => {
            let (m, b, xi) = builtin_fig2_target();
            Ok((Instance::Mdp(m), Some(b), Some(xi)))
        }
        TargetSpec::Builtin(name) if name == "fig2_reversed" => {
            let (m, b, xi) = builtin_fig2_reversed();
            Ok((Instance::Mdp(m), Some(b), Some(xi)))
        }
        TargetSpec::Builtin(name) => Err(Error::config("target.builtin", format!("unknown instance {name:?}"))),
        TargetSpec::Path(p) => Ok((Instance::load(p)?, None, None)),
        TargetSpec::Random {
            horizon,
            states,
            actions,
            min_actions,
            seed,
        } => Ok((
            match min_actions {
                Some(a2) => Instance::Game(random_game(*horizon, *states, *actions, *a2, *seed)?),
                None => Instance::Mdp(random_mdp(*horizon, *states, *actions, *seed)?),
            },
            None,
            None,
        )),
    }
}

fn behavior_for(spec: &BehaviorSpec, builtin: Option<Policy>, h: usize, s: usize, a: usize) -> Result<Policy> {
    match spec {
        BehaviorSpec::Default => Ok(builtin.unwrap_or_else(|| Policy::uniform(h, s, a))),
        BehaviorSpec::Uniform => Ok(Policy::uniform(h, s, a)),
        BehaviorSpec::Path(p) => {
            let text = fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<Problem> {
    if cfg.setting == Setting::LowerBound {
        let lb = cfg.lower_bound.expect("validated");
        return Ok(Problem::LowerBound {
            instance: build_hard_instance(lb.horizon, lb.states, lb.coverage, lb.epsilon, lb.regime)?,
            bad_sources: lb.bad_sources,
        });
    }
    let (instance, builtin_behavior, builtin_xi) = load_target(&cfg.target)?;
    match (cfg.setting, instance) {
        (Setting::Mdp, inst @ (Instance::Mdp(_) | Instance::Robust(_))) => {
            let target = match inst {
                Instance::Mdp(m) => m,
                Instance::Robust(r) => r.nominal().clone(),
                Instance::Game(_) => unreachable!(),
            };
            let d = target.dims();
            Ok(Problem::Mdp {
                behavior: behavior_for(&cfg.behavior, builtin_behavior, d.horizon, d.states, d.actions)?,
                xi: builtin_xi.unwrap_or_else(|| InitDist::uniform(d.states)),
                target,
            })
        }
        (Setting::Robust, inst @ (Instance::Mdp(_) | Instance::Robust(_))) => {
            let r = cfg.robust.expect("validated");
            let nominal = match inst {
                Instance::Mdp(m) => m,
                Instance::Robust(spec) => spec.nominal().clone(),
                Instance::Game(_) => unreachable!(),
            };
            let d = nominal.dims();
            Ok(Problem::Robust {
                behavior: behavior_for(&cfg.behavior, builtin_behavior, d.horizon, d.states, d.actions)?,
                xi: builtin_xi.unwrap_or_else(|| InitDist::uniform(d.states)),
                spec: RobustSpec::new(nominal, r.sigma)?,
                bounded: cfg.bounded(&r),
            })
        }
        (Setting::Game, Instance::Game(target)) => {
            let (h, s, a1, a2) = (target.horizon(), target.num_states(), target.max_actions(), target.min_actions());
            let behavior = match &cfg.behavior {
                BehaviorSpec::Path(_) => behavior_for(&cfg.behavior, None, h, s, a1 * a2)?,
                _ => Policy::product(
                    Array3::from_elem((h, s, a1), 1.0 / a1 as f64),
                    Array3::from_elem((h, s, a2), 1.0 / a2 as f64),
                )?,
            };
            Ok(Problem::Game {
                behavior,
                xi: InitDist::uniform(s),
                target,
            })
        }
        (setting, _) => Err(Error::config(
            "target",
            format!("instance kind does not match setting `{}`", setting.as_str()),
        )),
    }
}

/// Counts for `L` sources: sample, optionally subsample, tally.
fn collect_counts(
    cfg: &ExperimentConfig,
    k: usize,
    seed: u64,
    num_sources: usize,
    sample: impl Fn(usize, u64) -> Result<crate::data::SourceDataset>,
) -> Result<Vec<VisitCounts>> {
    (0..num_sources)
        .map(|l| {
            let ds = sample(l, mix(seed, &[2, l as u64]))?;
            debug_assert_eq!(ds.num_trajectories(), k);
            let kept = cfg.subsample.apply(&ds, cfg.penalty.delta, num_sources, mix(seed, &[3, l as u64]))?;
            Ok(count_visits(&kept))
        })
        .collect()
}

fn one_source(counts: &VisitCounts) -> Result<AggregatedModel> {
    aggregate_model(std::slice::from_ref(counts))
}

/// Learn with `alg` from `counts`, given how to solve one aggregated model
/// and how to reduce several single-source outputs to one policy.
fn learn(
    alg: Algorithm,
    counts: &[VisitCounts],
    cfg: &PenaltyConfig,
    solve: &dyn Fn(&AggregatedModel, &PenaltyConfig) -> Result<SolverOutput>,
    average: &dyn Fn(&[SolverOutput]) -> Result<Policy>,
) -> Result<Policy> {
    match alg {
        Algorithm::Hetpevi => Ok(solve(&aggregate_model(counts)?, cfg)?.policy),
        Algorithm::AvgPevi => {
            let single = cfg.without_source_term();
            let outs = counts
                .iter()
                .map(|c| solve(&one_source(c)?, &single))
                .collect::<Result<Vec<_>>>()?;
            average(&outs)
        }
        Algorithm::PeviPooled => Ok(solve(&AggregatedModel::pooled(counts)?, &cfg.without_source_term())?.policy),
    }
}

fn average_deterministic(num_actions: usize) -> impl Fn(&[SolverOutput]) -> Result<Policy> {
    move |outs| {
        let policies: Vec<Policy> = outs.iter().map(|o| o.policy.clone()).collect();
        avg_pevi(&policies, num_actions)
    }
}

/// Mean of the max-player halves of per-source game policies.
fn average_max_player(num_actions: usize) -> impl Fn(&[SolverOutput]) -> Result<Policy> {
    move |outs| {
        let tables = outs
            .iter()
            .map(|o| match &o.policy {
                Policy::Product { max, .. } => Ok(max.clone()),
                other => other.probabilities(num_actions),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mean = Array3::zeros(tables[0].dim());
        for t in &tables {
            mean.scaled_add(1.0 / tables.len() as f64, t);
        }
        Policy::mixed(mean)
    }
}

struct Cell {
    k: usize,
    l: usize,
    rep: usize,
    seed: u64,
}

fn timed<T>(record: bool, f: impl FnOnce() -> Result<T>) -> Result<(T, u64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, if record { start.elapsed().as_millis() as u64 } else { 0 }))
}

#[allow(clippy::too_many_arguments)]
fn run_mdp_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    setting: &str,
    target: &EpisodicMdp,
    test_xi: &InitDist,
    sources: &[EpisodicMdp],
    behaviors: &[Policy],
    data_xi: &InitDist,
) -> Result<Vec<ResultRecord>> {
    let counts = collect_counts(cfg, cell.k, cell.seed, sources.len(), |l, seed| {
        sample_dataset(&sources[l], &behaviors[l], data_xi, cell.k, seed, l)
    })?;
    let a = target.num_actions();
    cfg.algorithms
        .iter()
        .map(|&alg| {
            let (g, ms) = timed(cfg.record_timing, || {
                let pi = learn(alg, &counts, &cfg.penalty, &hetpevi, &average_deterministic(a))?;
                gap(target, &pi, test_xi)
            })?;
            Ok(record(setting, alg, cell, g, ms))
        })
        .collect()
}

fn record(setting: &str, alg: Algorithm, cell: &Cell, gap: f64, elapsed_ms: u64) -> ResultRecord {
    ResultRecord {
        setting: setting.to_string(),
        algorithm: alg,
        k: cell.k,
        l: cell.l,
        rep: cell.rep,
        gap,
        elapsed_ms,
        seed: cell.seed,
    }
}

fn run_cell(cfg: &ExperimentConfig, problem: &Problem, cell: &Cell) -> Result<Vec<ResultRecord>> {
    let src_seed = mix(cell.seed, &[1]);
    match problem {
        Problem::Mdp { target, behavior, xi } => {
            let sources = generate_sources(target, cell.l, &cfg.generator, src_seed)?;
            let behaviors = vec![behavior.clone(); cell.l];
            run_mdp_cell(cfg, cell, "mdp", target, xi, &sources, &behaviors, xi)
        }
        Problem::LowerBound { instance, bad_sources } => {
            let total = cell.l + bad_sources;
            let behaviors = instance.behaviors(cell.l, total);
            let mut out = Vec::new();
            for phi in 0..2 {
                let sources = instance.sample_sources(phi, total, src_seed);
                out.extend(run_mdp_cell(
                    cfg,
                    cell,
                    &format!("lower_bound_phi{phi}"),
                    &instance.targets[phi],
                    &instance.test_init,
                    &sources,
                    &behaviors,
                    &instance.data_init,
                )?);
            }
            Ok(out)
        }
        Problem::Game { target, behavior, xi } => {
            let sources = generate_game_sources(target, cell.l, &cfg.generator, src_seed)?;
            let counts = collect_counts(cfg, cell.k, cell.seed, cell.l, |l, seed| {
                sample_game_dataset(&sources[l], behavior, xi, cell.k, seed, l)
            })?;
            let (a1, a2) = (target.max_actions(), target.min_actions());
            let solve = |m: &AggregatedModel, p: &PenaltyConfig| hetpevi_game(m, a1, a2, p);
            cfg.algorithms
                .iter()
                .map(|&alg| {
                    let (g, ms) = timed(cfg.record_timing, || {
                        let mu = learn(alg, &counts, &cfg.penalty, &solve, &average_max_player(a1))?;
                        mg_gap(target, &mu, xi)
                    })?;
                    Ok(record("game", alg, cell, g, ms))
                })
                .collect()
        }
        Problem::Robust {
            spec,
            behavior,
            xi,
            bounded,
        } => {
            let sources = generate_bounded_sources(spec, cell.l, bounded, src_seed)?;
            let counts = collect_counts(cfg, cell.k, cell.seed, cell.l, |l, seed| {
                sample_dataset(&sources[l], behavior, xi, cell.k, seed, l)
            })?;
            let sigma = spec.sigma();
            let solve = |m: &AggregatedModel, p: &PenaltyConfig| hetpevi_robust(m, sigma, p);
            let a = spec.nominal().num_actions();
            cfg.algorithms
                .iter()
                .map(|&alg| {
                    let (g, ms) = timed(cfg.record_timing, || {
                        let pi = learn(alg, &counts, &cfg.penalty, &solve, &average_deterministic(a))?;
                        r_gap(spec, &pi, xi)
                    })?;
                    Ok(record("robust", alg, cell, g, ms))
                })
                .collect()
        }
    }
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &k in &cfg.k_list {
        for &l in &cfg.l_list {
            for rep in 0..cfg.replications {
                out.push(Cell {
                    k,
                    l,
                    rep,
                    seed: mix(cfg.base_seed, &[k as u64, l as u64, rep as u64]),
                });
            }
        }
    }
    out
}

/// Every `(K, L, rep, algorithm)` record, ordered by that tuple regardless
/// of which worker finished first.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let problem = prepare(cfg)?;
    let results: Vec<Result<Vec<ResultRecord>>> = cells(cfg)
        .par_iter()
        .map(|c| {
            run_cell(cfg, &problem, c).map_err(|e| e.context(format!("cell K={}, L={}, rep={}", c.k, c.l, c.rep)))
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.num_records());
    for r in results {
        records.extend(r?);
    }
    Ok(records)
}

/// Mean and spread of one `(setting, algorithm, K, L)` group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub setting: String,
    pub algorithm: Algorithm,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (zero for a single replication).
    pub std: f64,
    /// `std / sqrt(n)`.
    pub se: f64,
}

/// Group records by `(setting, algorithm, K, L)` in first-seen order.
pub fn summarize(records: &[ResultRecord]) -> Vec<CellSummary> {
    let mut groups: Vec<(CellSummary, Vec<f64>)> = Vec::new();
    for r in records {
        let pos = groups
            .iter()
            .position(|(g, _)| g.setting == r.setting && g.algorithm == r.algorithm && g.k == r.k && g.l == r.l);
        let idx = pos.unwrap_or_else(|| {
            groups.push((
                CellSummary {
                    setting: r.setting.clone(),
                    algorithm: r.algorithm,
                    k: r.k,
                    l: r.l,
                    n: 0,
                    mean: 0.0,
                    std: 0.0,
                    se: 0.0,
                },
                Vec::new(),
            ));
            groups.len() - 1
        });
        groups[idx].1.push(r.gap);
    }
    groups
        .into_iter()
        .map(|(mut g, xs)| {
            let n = xs.len() as f64;
            g.n = xs.len();
            g.mean = xs.iter().sum::<f64>() / n;
            g.std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - g.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            g.se = g.std / n.sqrt();
            g
        })
        .collect()
}

/// Worst-case-over-targets mean gap of one `(K, L)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCell {
    pub algorithm: Algorithm,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub mean_gap: [f64; 2],
    pub max_mean_gap: f64,
    pub epsilon: f64,
    /// `max_mean_gap ≥ ε`.
    pub not_learned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub params: HardInstanceParams,
    pub cells: Vec<LowerBoundCell>,
}

/// Run the hard-instance sweep and reduce it to max-over-target means.
pub fn run_lower_bound(cfg: &ExperimentConfig) -> Result<(Vec<ResultRecord>, LowerBoundReport)> {
    if cfg.setting != Setting::LowerBound {
        return Err(Error::config("setting", "run_lower_bound needs setting = lower_bound"));
    }
    let records = run_experiment(cfg)?;
    let lb = cfg.lower_bound.expect("validated");
    let params = build_hard_instance(lb.horizon, lb.states, lb.coverage, lb.epsilon, lb.regime)?.params;
    Ok((records.clone(), lower_bound_report(&records, params)))
}

pub fn lower_bound_report(records: &[ResultRecord], params: HardInstanceParams) -> LowerBoundReport {
    let summary = summarize(records);
    let mut cells: Vec<LowerBoundCell> = Vec::new();
    for s in &summary {
        let phi = match s.setting.as_str() {
            "lower_bound_phi0" => 0,
            "lower_bound_phi1" => 1,
            _ => continue,
        };
        let pos = cells
            .iter()
            .position(|c| c.algorithm == s.algorithm && c.k == s.k && c.l == s.l);
        let idx = pos.unwrap_or_else(|| {
            cells.push(LowerBoundCell {
                algorithm: s.algorithm,
                k: s.k,
                l: s.l,
                mean_gap: [0.0; 2],
                max_mean_gap: 0.0,
                epsilon: params.epsilon,
                not_learned: false,
            });
            cells.len() - 1
        });
        cells[idx].mean_gap[phi] = s.mean;
    }
    for c in &mut cells {
        c.max_mean_gap = c.mean_gap[0].max(c.mean_gap[1]);
        c.not_learned = c.max_mean_gap >= c.epsilon;
    }
    LowerBoundReport { params, cells }
}

/// Coverage of the sources drawn for replication 0 at the first `K`, per `L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
    pub report: CoverageReport,
}

pub fn coverage_sidecar(cfg: &ExperimentConfig) -> Result<Vec<CoverageEntry>> {
    cfg.validate()?;
    let problem = prepare(cfg)?;
    let k = cfg.k_list[0];
    cfg.l_list
        .iter()
        .map(|&l| {
            let seed = mix(cfg.base_seed, &[k as u64, l as u64, 0]);
            let src_seed = mix(seed, &[1]);
            let report = match &problem {
                Problem::Mdp { target, behavior, xi } => {
                    let sources = generate_sources(target, l, &cfg.generator, src_seed)?;
                    let sets = coverage_sets(&sources, &vec![behavior.clone(); l], &vec![xi.clone(); l])?;
                    coverage_params(target, xi, &sets)?
                }
                Problem::Game { target, behavior, xi } => {
                    let sources = generate_game_sources(target, l, &cfg.generator, src_seed)?;
                    let sets = coverage_sets_game(&sources, &vec![behavior.clone(); l], &vec![xi.clone(); l])?;
                    coverage_params_game(target, xi, &sets)?
                }
                Problem::Robust {
                    spec,
                    behavior,
                    xi,
                    bounded,
                } => {
                    let sources = generate_bounded_sources(spec, l, bounded, src_seed)?;
                    let sets = coverage_sets(&sources, &vec![behavior.clone(); l], &vec![xi.clone(); l])?;
                    coverage_params_robust(spec, xi, &sets)?
                }
                Problem::LowerBound { instance, bad_sources } => {
                    let total = l + bad_sources;
                    let sources = instance.sample_sources(0, total, src_seed);
                    let sets = coverage_sets(
                        &sources,
                        &instance.behaviors(l, total),
                        &vec![instance.data_init.clone(); total],
                    )?;
                    coverage_params(&instance.targets[0], &instance.test_init, &sets)?
                }
            };
            Ok(CoverageEntry { l, seed, report })
        })
        .collect()
}

pub const CSV_HEADER: [&str; 8] = ["setting", "algorithm", "K", "L", "rep", "gap", "elapsed_ms", "seed"];

pub fn write_records(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::DataIntegrity(format!(
            "results header {:?} does not match {:?}",
            header.iter().collect::<Vec<_>>(),
            CSV_HEADER
        )));
    }
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Paths written by [`write_outputs`].
#[derive(Clone, Debug)]
pub struct OutputFiles {
    pub csv: PathBuf,
    pub config: PathBuf,
    pub coverage: PathBuf,
}

/// `<setting>_<tag>.csv` plus `.config.json` and `.coverage.json` sidecars.
pub fn write_outputs(
    dir: impl AsRef<Path>,
    tag: &str,
    cfg: &ExperimentConfig,
    records: &[ResultRecord],
    coverage: &impl Serialize,
) -> Result<OutputFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let stem = format!("{}_{tag}", cfg.setting.as_str());
    let files = OutputFiles {
        csv: dir.join(format!("{stem}.csv")),
        config: dir.join(format!("{stem}.config.json")),
        coverage: dir.join(format!("{stem}.coverage.json")),
    };
    write_records(&files.csv, records)?;
    fs::write(&files.config, serde_json::to_string_pretty(cfg)?)?;
    fs::write(&files.coverage, serde_json::to_string_pretty(coverage)?)?;
    Ok(files)
}
