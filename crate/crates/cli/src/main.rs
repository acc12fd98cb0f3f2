use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kerneltune::env::{sim_build, SimulatorSpec};
use kerneltune::metrics::{fast_at_1, geometric_mean, regret_bound, weighted_speedup};
use kerneltune::model::RawConfig;
use kerneltune::orchestrator::{run_optimization_with, run_regret_experiment, Clustering, RunOptions};
use kerneltune::trajectory::{export_trajectory, load_trajectory, Trajectory, TrajectoryFormat};
use kerneltune::Config;

/// Bandit-driven kernel optimization against a simulated environment.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write its trajectory and summaries.
    Optimize(RunArgs),
    /// Run seeded hierarchical and flat optimizations and aggregate regret.
    Regret {
        #[command(flatten)]
        run: RunArgs,
        /// Number of independent seeds.
        #[arg(long, default_value_t = 30)]
        seeds: usize,
    },
    /// Summarise trajectory exports as per-round speedup, Fast@1 and regret.
    Report {
        /// Trajectory files written by `optimize`.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulator specification (TOML); defaults to the bundled reference.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of rounds.
    #[arg(long, allow_negative_numbers = true)]
    iterations: Option<i64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Treat every kernel as its own cluster.
    #[arg(long)]
    flat_ucb: bool,
    /// Weight of the compatibility term.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Trajectory format: tsv or jsonl.
    #[arg(long, default_value = "tsv")]
    format: String,
}

impl RunArgs {
    fn config(&self) -> Result<Config> {
        let mut raw = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RawConfig::parse_kv(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RawConfig::default(),
        };
        if let Some(n) = self.iterations {
            raw.horizon = Some(n);
        }
        if let Some(seed) = self.seed {
            raw.rng_seed = Some(seed);
        }
        if let Some(alpha) = self.alpha {
            raw.alpha = Some(alpha);
        }
        Ok(raw.validate()?)
    }

    fn spec(&self) -> Result<SimulatorSpec> {
        match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                SimulatorSpec::from_toml_str(&text).with_context(|| format!("loading spec {}", path.display()))
            }
            None => Ok(SimulatorSpec::reference()),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn optimize(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let spec = args.spec()?;
    let format: TrajectoryFormat = args.format.parse()?;
    let out = args.out_dir()?;
    let clustering = if args.flat_ucb { Clustering::Flat } else { Clustering::Hierarchical };

    let mut sim = sim_build(spec.clone(), config.rng_seed)?.with_clip_floor(config.reward_clip_floor);
    let result = run_optimization_with(&config, &mut sim, config.rng_seed, RunOptions { clustering, record_state: false })?;

    let trajectory = out.join(format!("trajectory.{}", format.extension()));
    export_trajectory(&result, &trajectory, format.extension())?;
    write(&out.join("bandit_state.tsv"), &result.state.dump_table())?;
    write(&out.join("compatibility.tsv"), &result.compat.export_table())?;
    if let Some(regret) = &result.regret {
        let eps_profile = result.profile_error.unwrap_or(0.0);
        let s = spec.strategies.len();
        let tsv = regret.to_tsv(|t| regret_bound(t, s, spec.epsilon_cluster, eps_profile, config.alpha).ok());
        write(&out.join("regret.tsv"), &tsv)?;
    }

    println!(
        "best {} latency {} ms ({:.3}x over k0), pool {}, trajectory {}",
        result.best_kernel_id,
        result.best_latency,
        result.initial_latency / result.best_latency,
        result.pool.len(),
        trajectory.display()
    );
    if let Some(regret) = &result.regret {
        println!(
            "cumulative regret {:.4} against optimum {:.4}",
            regret.final_cumulative(),
            regret.optimal_value
        );
    }
    Ok(())
}

fn regret(args: &RunArgs, seeds: usize) -> Result<()> {
    if args.flat_ucb {
        bail!("--flat-ucb does not apply to regret; both policies are always run");
    }
    let config = args.config()?;
    let spec = args.spec()?;
    let out = args.out_dir()?;
    let experiment = run_regret_experiment(&spec, &config, seeds, config.horizon)?;
    let path = out.join("regret_experiment.tsv");
    write(&path, &experiment.to_tsv())?;
    let t = experiment.horizon;
    println!(
        "{} seeds, {t} rounds: hierarchical {:.2} ± {:.2}, flat {:.2} ± {:.2}, bound {}, written to {}",
        seeds,
        experiment.hierarchical.mean[t - 1],
        experiment.hierarchical.std[t - 1],
        experiment.flat.mean[t - 1],
        experiment.flat.std[t - 1],
        experiment.bound(t).map_or_else(|| "undefined".to_string(), |b| format!("{b:.2}")),
        path.display()
    );
    Ok(())
}

/// Best latency after each round, starting from the first seed kernel.
fn best_so_far(trajectory: &Trajectory) -> Vec<f64> {
    let mut best = trajectory.summary.initial_latency;
    trajectory
        .records
        .iter()
        .map(|r| {
            if let (true, Some(l)) = (r.child_valid, r.child_latency) {
                best = best.min(l);
            }
            best
        })
        .collect()
}

/// Per-round table across exports: runtime-weighted, geometric-mean and best
/// speedup, Fast@1 and mean cumulative regret. Shorter runs hold their last
/// value.
fn report(files: &[PathBuf]) -> Result<String> {
    let runs: Vec<Trajectory> = files
        .iter()
        .map(|f| load_trajectory(f).with_context(|| format!("loading {}", f.display())))
        .collect::<Result<_>>()?;
    let horizon = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    let best: Vec<Vec<f64>> = runs.iter().map(best_so_far).collect();
    let base: Vec<f64> = runs.iter().map(|r| r.summary.initial_latency).collect();
    let regret: Vec<Option<Vec<f64>>> = runs
        .iter()
        .map(|r| {
            r.summary.optimal_value.map(|mu| {
                r.records
                    .iter()
                    .scan(0.0, |acc, rec| {
                        *acc += mu - rec.reward;
                        Some(*acc)
                    })
                    .collect()
            })
        })
        .collect();

    let mut out = String::from("t\tweighted_speedup\tgeomean_speedup\tbest_speedup\tfast_at_1\tmean_cumulative_regret\n");
    for t in 0..=horizon {
        let latest: Vec<f64> = best
            .iter()
            .zip(&base)
            .map(|(b, base)| if t == 0 || b.is_empty() { *base } else { b[(t - 1).min(b.len() - 1)] })
            .collect();
        let speedups: Vec<f64> = base.iter().zip(&latest).map(|(b, l)| b / l).collect();
        let regrets: Vec<f64> = regret
            .iter()
            .flatten()
            .map(|c| if t == 0 || c.is_empty() { 0.0 } else { c[(t - 1).min(c.len() - 1)] })
            .collect();
        let mean_regret = if regrets.is_empty() {
            f64::NAN
        } else {
            regrets.iter().sum::<f64>() / regrets.len() as f64
        };
        let _ = writeln!(
            out,
            "{t}\t{}\t{}\t{}\t{}\t{mean_regret}",
            weighted_speedup(&base, &latest)?,
            geometric_mean(&speedups)?,
            speedups.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            fast_at_1(&speedups)?,
        );
    }
    Ok(out)
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("KERNELBAND_LOG").as_deref() {
        Err(_) | Ok("") | Ok("quiet") => log::LevelFilter::Warn,
        Ok("info") => log::LevelFilter::Info,
        Ok("trace") => log::LevelFilter::Trace,
        Ok(other) => bail!("KERNELBAND_LOG must be quiet, info or trace, got {other:?}"),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn run() -> Result<()> {
    init_logging()?;
    let cli = Cli::parse();
    match &cli.command {
        Command::Optimize(args) => optimize(args),
        Command::Regret { run, seeds } => regret(run, *seeds),
        Command::Report { files } => {
            print!("{}", report(files)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
