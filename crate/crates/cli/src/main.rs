use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use hetpevi_core::experiment::{
    coverage_sidecar, lower_bound_report, run_experiment, summarize, write_outputs, Algorithm, ExperimentConfig,
    LowerBoundConfig, RobustConfig, Setting, TargetSpec,
};
use hetpevi_core::{
    evaluate_policy, gap, mg_gap, optimal_policy, r_gap, robust_policy_value, solve_game, InitDist, Instance,
    PenaltyConfig, Policy, Regime, SubsampleConfig,
};

#[derive(Parser)]
#[command(name = "hetpevi", version, about = "Offline RL from perturbed data sources: experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// (K, L) sweep on a single-agent target (default: the built-in fig2 sweep)
    Simulate(RunArgs),
    /// Sweep on a two-player zero-sum game
    Game(RunArgs),
    /// Sweep on a KL-robust target
    Robust(RunArgs),
    /// Hard-instance sweep; reports the worst-case-over-targets mean gap
    LowerBound(RunArgs),
    /// Coverage quantities of the sources a config would draw
    Coverage(RunArgs),
    /// Value and gap of a saved policy on an instance file
    Eval {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (.json or .toml)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `base_seed`
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Output file tag: <setting>_<tag>.csv
    #[arg(long, default_value = "run")]
    tag: String,
    /// Keep every sample instead of two-fold subsampling
    #[arg(long)]
    no_subsample: bool,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Record wall-clock time per record (breaks byte-identical reruns)
    #[arg(long)]
    timing: bool,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(cfg)
}

fn default_config(setting: Setting) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::fig2();
    cfg.setting = setting;
    match setting {
        Setting::Mdp => {}
        Setting::Game => {
            cfg.target = TargetSpec::Random {
                horizon: 4,
                states: 3,
                actions: 3,
                min_actions: Some(3),
                seed: 7,
            };
            cfg.k_list = vec![100, 1000];
            cfg.l_list = vec![2, 8];
            cfg.replications = 20;
            cfg.penalty = PenaltyConfig::new(0.05, 0.05);
        }
        Setting::Robust => {
            cfg.target = TargetSpec::Random {
                horizon: 4,
                states: 3,
                actions: 3,
                min_actions: None,
                seed: 7,
            };
            cfg.k_list = vec![100, 1000];
            cfg.l_list = vec![2, 8];
            cfg.replications = 20;
            // the 1/(σ·P̂min) factor saturates the penalty at H for c much above this
            cfg.penalty = PenaltyConfig::new(0.001, 0.05);
            cfg.robust = Some(RobustConfig {
                sigma: 0.1,
                lower: 0.25,
                upper: 4.0,
                max_attempts: 10_000,
            });
        }
        Setting::LowerBound => {
            cfg.k_list = vec![1000];
            cfg.l_list = vec![1, 64, 512];
            cfg.replications = 20;
            cfg.algorithms = vec![Algorithm::Hetpevi];
            // c = 1 puts the per-step penalty just above the unit reward at L = 512
            cfg.penalty = PenaltyConfig::new(0.5, 0.05);
            cfg.lower_bound = Some(LowerBoundConfig {
                horizon: 8,
                states: 2,
                coverage: 2.0,
                epsilon: 0.1,
                regime: Regime::SourceLimited,
                bad_sources: 0,
            });
        }
    }
    cfg
}

fn resolve(args: &RunArgs, setting: Option<Setting>) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => default_config(setting.unwrap_or(Setting::Mdp)),
    };
    if let Some(expected) = setting {
        ensure!(
            cfg.setting == expected,
            "config has setting `{}` but this subcommand runs `{}`",
            cfg.setting.as_str(),
            expected.as_str()
        );
    }
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if args.no_subsample {
        cfg.subsample = SubsampleConfig::passthrough();
    }
    cfg.record_timing |= args.timing;
    cfg.validate()?;
    Ok(cfg)
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        ensure!(n > 0, "--jobs must be positive");
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

fn run(args: &RunArgs, setting: Setting) -> Result<()> {
    let cfg = resolve(args, Some(setting))?;
    let (records, coverage) = with_pool(args.jobs, || -> Result<_> {
        Ok((run_experiment(&cfg)?, coverage_sidecar(&cfg)?))
    })??;
    let files = if setting == Setting::LowerBound {
        let lb = cfg.lower_bound.expect("validated");
        let params = hetpevi_core::build_hard_instance(lb.horizon, lb.states, lb.coverage, lb.epsilon, lb.regime)?.params;
        let report = lower_bound_report(&records, params);
        for c in &report.cells {
            println!(
                "{:<12} K={:<7} L={:<5} mean gap φ=0 {:.4}  φ=1 {:.4}  max {:.4}  {}",
                c.algorithm.as_str(),
                c.k,
                c.l,
                c.mean_gap[0],
                c.mean_gap[1],
                c.max_mean_gap,
                if c.not_learned { "≥ ε" } else { "< ε" }
            );
        }
        write_outputs(&args.out_dir, &args.tag, &cfg, &records, &(&report, &coverage))?
    } else {
        for s in summarize(&records) {
            println!(
                "{:<12} K={:<7} L={:<5} mean gap {:.4} ± {:.4} (n={})",
                s.algorithm.as_str(),
                s.k,
                s.l,
                s.mean,
                s.se,
                s.n
            );
        }
        write_outputs(&args.out_dir, &args.tag, &cfg, &records, &coverage)?
    };
    println!("wrote {}", files.csv.display());
    Ok(())
}

fn coverage(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, None)?;
    let entries = with_pool(args.jobs, || coverage_sidecar(&cfg))??;
    for e in &entries {
        println!(
            "L={:<5} L†={:<5} C†={}  d_min={:.3e}{}",
            e.l,
            e.report.min_sources,
            e.report.collective_coverage,
            e.report.d_min,
            if e.report.lower_bound { "  (lower bound)" } else { "" }
        );
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let path = args.out_dir.join(format!("{}_{}.coverage.json", cfg.setting.as_str(), args.tag));
    std::fs::write(&path, serde_json::to_string_pretty(&entries)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval(instance: &Path, policy: &Path) -> Result<()> {
    let inst = Instance::load(instance)?;
    let text = std::fs::read_to_string(policy).with_context(|| format!("reading {}", policy.display()))?;
    let pi: Policy = serde_json::from_str(&text).with_context(|| format!("parsing {}", policy.display()))?;
    let out = match &inst {
        Instance::Mdp(m) => {
            let xi = InitDist::uniform(m.num_states());
            let (star, _) = optimal_policy(m);
            serde_json::json!({
                "value": evaluate_policy(m, &pi, &xi)?,
                "optimal_value": evaluate_policy(m, &star, &xi)?,
                "gap": gap(m, &pi, &xi)?,
            })
        }
        Instance::Game(g) => {
            let xi = InitDist::uniform(g.num_states());
            serde_json::json!({
                "equilibrium_value": solve_game(g, 1e-9)?.value(&xi),
                "gap": mg_gap(g, &pi, &xi)?,
            })
        }
        Instance::Robust(r) => {
            let xi = InitDist::uniform(r.nominal().num_states());
            serde_json::json!({
                "robust_value": robust_policy_value(r, &pi, &xi)?,
                "gap": r_gap(r, &pi, &xi)?,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(a) => run(a, Setting::Mdp),
        Command::Game(a) => run(a, Setting::Game),
        Command::Robust(a) => run(a, Setting::Robust),
        Command::LowerBound(a) => run(a, Setting::LowerBound),
        Command::Coverage(a) => coverage(a),
        Command::Eval { instance, policy } => eval(instance, policy),
    }
}
