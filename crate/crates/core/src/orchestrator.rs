//! The optimization loop and the multi-seed regret experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bandit::{select_arm, BanditState, SelectionContext};
use crate::clustering::{runtime_feature_vector, ClusterModel, RuntimePoint, ZScore};
use crate::compatibility::{
    profiling_feature_vector, CompatibilityModel, CounterRange, ProfilingFeatures, WarmStartPair,
};
use crate::env::{sim_build, Environment, Evaluation, SimulatorSpec, TransformOutcome};
use crate::error::{Error, Result};
use crate::metrics::{cumulative_regret, regret_bound, RegretSeries};
use crate::model::{
    compute_reward, CandidatePool, Config, KernelCandidate, KernelId, PullRecord, NUM_COUNTERS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clustering {
    /// Arms are (cluster, strategy) pairs over a k-means partition.
    #[default]
    Hierarchical,
    /// Every kernel is its own cluster.
    Flat,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub clustering: Clustering,
    /// Keep a bandit-state table per round in [`RunResult::state_log`].
    pub record_state: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best_kernel_id: KernelId,
    pub best_latency: f64,
    /// Latency of the first seed kernel.
    pub initial_latency: f64,
    pub trajectory: Vec<PullRecord>,
    pub state: BanditState,
    /// `None` under flat clustering.
    pub cluster_model: Option<ClusterModel>,
    /// Final cluster label of every pooled kernel.
    pub clusters: BTreeMap<KernelId, usize>,
    pub pool: CandidatePool,
    pub compat: CompatibilityModel,
    pub optimal_value: Option<f64>,
    pub regret: Option<RegretSeries>,
    /// Largest `|ψ - p|` over the final pool and all strategies, when the
    /// environment knows the true success probabilities.
    pub profile_error: Option<f64>,
    pub state_log: Vec<String>,
}

pub fn run_optimization(config: &Config, env: &mut dyn Environment, seed: u64) -> Result<RunResult> {
    run_optimization_with(config, env, seed, RunOptions::default())
}

/// Per-kernel features, aligned with the pool's order.
#[derive(Default)]
struct FeatureCache {
    runtime: Vec<RuntimePoint>,
    counters: Vec<[f64; NUM_COUNTERS]>,
}

impl FeatureCache {
    fn push(&mut self, candidate: &KernelCandidate) -> Result<()> {
        let m = candidate
            .measurement
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("{} has no measurement", candidate.id)))?;
        self.runtime.push(runtime_feature_vector(m)?.raw);
        self.counters.push(m.counters);
        Ok(())
    }

    fn profiling(&self) -> Result<Vec<ProfilingFeatures>> {
        let range = CounterRange::fit(&self.counters)?;
        self.counters
            .iter()
            .map(|c| profiling_feature_vector(c, &range))
            .collect()
    }
}

/// A child is kept only if it passed correctness and its measurement is
/// usable for both reward and features.
fn usable(evaluation: &Evaluation) -> bool {
    let m = &evaluation.measurement;
    m.correctness_passed
        && m.latency > 0.0
        && m.latency.is_finite()
        && runtime_feature_vector(m).is_ok()
}

pub fn run_optimization_with(
    config: &Config,
    env: &mut dyn Environment,
    seed: u64,
    options: RunOptions,
) -> Result<RunResult> {
    let strategies = env.strategies().to_vec();
    if strategies.iter().enumerate().any(|(i, s)| s.id.0 != i) {
        return Err(Error::Environment("strategy ids must be 0..|S| in order".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let seeds = env.seed_kernels()?;
    if seeds.is_empty() {
        return Err(Error::Environment("no seed kernel was produced".into()));
    }
    let mut pool = CandidatePool::new();
    let mut cache = FeatureCache::default();
    for (i, s) in seeds.into_iter().enumerate() {
        if !usable(&s.evaluation) {
            return Err(Error::Environment(format!("seed kernel {i} failed evaluation")));
        }
        let candidate = KernelCandidate {
            id: KernelId(i as u64),
            parent_id: None,
            applied_strategy: None,
            source: s.source,
            measurement: Some(s.evaluation.measurement),
            valid: true,
            compile_time: s.evaluation.compile_time,
        };
        cache.push(&candidate)?;
        pool.insert(candidate)?;
    }
    let initial_latency = pool.as_slice()[0].latency().expect("measured");
    let mut next_id = pool.len() as u64;

    let mut compat = CompatibilityModel::new(
        strategies.len(),
        config.buffer_capacity,
        config.learning_rate,
        config.l2_penalty,
    );
    if config.warm_start_pairs > 0 {
        let raw = env.warm_start_pairs(config.warm_start_pairs);
        if !raw.is_empty() {
            let range = CounterRange::fit(raw.iter().map(|p| &p.counters).chain(&cache.counters))?;
            let pairs = raw
                .iter()
                .map(|p| {
                    Ok(WarmStartPair {
                        strategy: p.strategy,
                        features: profiling_feature_vector(&p.counters, &range)?,
                        label: p.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            compat.warm_start(&pairs, &mut rng)?;
        }
    }

    let mut state = BanditState::new(strategies.len());
    let mut cluster_model = match options.clustering {
        Clustering::Hierarchical => Some(ClusterModel::new(config.num_clusters)),
        Clustering::Flat => None,
    };
    let mut trajectory = Vec::with_capacity(config.horizon);
    let mut state_log = Vec::new();

    for round in 1..=config.horizon {
        let t = state.t();
        let ids: Vec<KernelId> = pool.iter().map(|k| k.id).collect();

        let clusters: Vec<usize> = match cluster_model.as_mut() {
            Some(model) => {
                if model.needs_refresh(t, pool.len(), config.refresh_interval) {
                    model.refresh(t, &ids, &cache.runtime, &mut rng)?;
                    log::debug!("round {round}: refreshed {} clusters", model.num_clusters());
                } else {
                    let stats = ZScore::fit(&cache.runtime)?;
                    for (id, raw) in ids.iter().zip(&cache.runtime) {
                        if model.cluster_of(*id).is_none() {
                            model.assign_new(*id, raw, &stats);
                        }
                    }
                }
                ids.iter()
                    .map(|id| model.cluster_of(*id).expect("every pooled kernel is assigned"))
                    .collect()
            }
            None => ids.iter().map(|id| id.0 as usize).collect(),
        };

        let features = if config.alpha != 0.0 { cache.profiling()? } else { Vec::new() };
        let choice = select_arm(
            &state,
            &SelectionContext {
                pool: &pool,
                clusters: &clusters,
                features: &features,
                compat: &compat,
                alpha: config.alpha,
                strategies: &strategies,
            },
        )?;

        let parent_index = ids.binary_search(&choice.kernel_id).expect("selected from pool");
        let parent = pool.as_slice()[parent_index].clone();
        let parent_latency = parent.latency().expect("pooled kernels are measured");
        let strategy = &strategies[choice.strategy_id.0];

        let (child, evaluation) = match env.transform(&parent, strategy) {
            TransformOutcome::Generated { source } => {
                let id = KernelId(next_id);
                next_id += 1;
                let evaluation = match env.evaluate(&source) {
                    Ok(e) => Some(e),
                    Err(e) => {
                        log::debug!("round {round}: evaluating {id} failed: {e}");
                        None
                    }
                };
                (Some((id, source)), evaluation)
            }
            TransformOutcome::Failed(reason) => {
                log::debug!("round {round}: transform failed ({reason:?})");
                (None, None)
            }
        };
        let valid = evaluation.as_ref().is_some_and(usable);
        let child_latency = evaluation.as_ref().map(|e| e.measurement.latency);
        let reward = compute_reward(
            parent_latency,
            if valid { child_latency } else { None },
            valid,
            config.reward_clip_floor,
        )?;

        state.update_stats(choice.cluster, choice.strategy_id, reward);
        let phi = match features.get(parent_index) {
            Some(phi) => *phi,
            None => {
                let range = CounterRange::fit(&cache.counters)?;
                profiling_feature_vector(&cache.counters[parent_index], &range)?
            }
        };
        compat.record_outcome(choice.strategy_id, phi, reward, &mut rng);

        log::info!(
            "round {round}: {} {} cluster {} score {} reward {reward}",
            choice.kernel_id,
            choice.strategy_id,
            choice.cluster,
            choice.score
        );
        log::trace!("round {round} state\n{}", state.dump_table());
        if options.record_state {
            state_log.push(state.dump_table());
        }

        trajectory.push(PullRecord {
            round,
            kernel_id: choice.kernel_id,
            strategy_id: choice.strategy_id,
            cluster: choice.cluster,
            ucb_score: choice.score,
            reward,
            child_id: child.as_ref().map(|(id, _)| *id),
            child_valid: valid,
            child_latency,
        });

        if let (true, Some((id, source)), Some(evaluation)) = (valid, child, evaluation) {
            let candidate = KernelCandidate {
                id,
                parent_id: Some(parent.id),
                applied_strategy: Some(choice.strategy_id),
                source,
                measurement: Some(evaluation.measurement),
                valid: true,
                compile_time: evaluation.compile_time,
            };
            cache.push(&candidate)?;
            pool.insert(candidate)?;
        }
    }

    let clusters: BTreeMap<KernelId, usize> = match cluster_model.as_ref() {
        Some(model) if model.is_fitted() => {
            // Kernels added in the final round have not been assigned yet.
            let mut model = model.clone();
            let stats = ZScore::fit(&cache.runtime)?;
            for (k, raw) in pool.iter().zip(&cache.runtime) {
                if model.cluster_of(k.id).is_none() {
                    model.assign_new(k.id, raw, &stats);
                }
            }
            model.assignment().clone()
        }
        Some(_) => BTreeMap::new(),
        None => pool.iter().map(|k| (k.id, k.id.0 as usize)).collect(),
    };

    let profile_error = {
        let features = cache.profiling()?;
        let mut worst: Option<f64> = None;
        for (k, phi) in pool.iter().zip(&features) {
            for s in &strategies {
                if let Some(p) = env.success_probability(&k.source, s.id) {
                    let err = (compat.predict(s.id, phi) - p).abs();
                    worst = Some(worst.map_or(err, |w| w.max(err)));
                }
            }
        }
        worst
    };

    let optimal_value = env.optimal_value();
    let regret = optimal_value.map(|mu| cumulative_regret(&trajectory, mu));
    let best = pool.best().expect("pool holds the seeds");
    Ok(RunResult {
        best_kernel_id: best.id,
        best_latency: best.latency().expect("measured"),
        initial_latency,
        trajectory,
        state,
        cluster_model,
        clusters,
        pool,
        compat,
        optimal_value,
        regret,
        profile_error,
        state_log,
    })
}

/// Seed-wise summary of one policy's cumulative regret.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretAggregate {
    /// Mean over seeds of cumulative regret, per round.
    pub mean: Vec<f64>,
    /// Sample standard deviation over seeds, per round (0 for one seed).
    pub std: Vec<f64>,
    /// Mean over seeds of the running average reward, per round.
    pub average_reward: Vec<f64>,
    /// Mean over seeds of the observed reward, per round.
    pub reward: Vec<f64>,
    /// Final cumulative regret of each seed, in seed order.
    pub finals: Vec<f64>,
    /// Mean over seeds of the final profile error.
    pub profile_error: Option<f64>,
}

impl RegretAggregate {
    fn from_series(series: &[(RegretSeries, Option<f64>)], horizon: usize) -> Self {
        let n = series.len() as f64;
        let column = |f: &dyn Fn(&RegretSeries, usize) -> f64, i: usize| -> Vec<f64> {
            series.iter().map(|(s, _)| f(s, i)).collect()
        };
        let mut agg = RegretAggregate {
            mean: Vec::with_capacity(horizon),
            std: Vec::with_capacity(horizon),
            average_reward: Vec::with_capacity(horizon),
            reward: Vec::with_capacity(horizon),
            finals: series.iter().map(|(s, _)| s.final_cumulative()).collect(),
            profile_error: None,
        };
        for i in 0..horizon {
            let c = column(&|s, i| s.cumulative[i], i);
            let mean = c.iter().sum::<f64>() / n;
            let var = if series.len() > 1 {
                c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            agg.mean.push(mean);
            agg.std.push(var.sqrt());
            agg.average_reward.push(column(&|s, i| s.average_reward[i], i).iter().sum::<f64>() / n);
            agg.reward.push(column(&|s, i| s.rewards[i], i).iter().sum::<f64>() / n);
        }
        let errors: Vec<f64> = series.iter().filter_map(|(_, e)| *e).collect();
        if !errors.is_empty() {
            agg.profile_error = Some(errors.iter().sum::<f64>() / errors.len() as f64);
        }
        agg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretExperiment {
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub num_strategies: usize,
    pub optimal_value: f64,
    pub epsilon_cluster: f64,
    pub alpha: f64,
    pub hierarchical: RegretAggregate,
    pub flat: RegretAggregate,
}

impl RegretExperiment {
    /// Regret bound at round `t` with the spec's ε_cluster and the measured
    /// mean profile error of the hierarchical runs. `None` for `t < 2`.
    pub fn bound(&self, t: usize) -> Option<f64> {
        let eps_profile = self.hierarchical.profile_error.unwrap_or(0.0);
        regret_bound(t, self.num_strategies, self.epsilon_cluster, eps_profile, self.alpha).ok()
    }

    /// Tab-separated per-round summary. The first five columns follow the
    /// single-run regret export.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "t\treward\tcumulative_regret\tbound_value\taverage_reward\tcumulative_regret_std\tflat_cumulative_regret\tflat_cumulative_regret_std\n",
        );
        for i in 0..self.horizon {
            let t = i + 1;
            let h = &self.hierarchical;
            let f = &self.flat;
            let _ = writeln!(
                out,
                "{t}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                h.reward[i],
                h.mean[i],
                self.bound(t).unwrap_or(f64::NAN),
                h.average_reward[i],
                h.std[i],
                f.mean[i],
                f.std[i]
            );
        }
        out
    }
}

/// Runs hierarchical and flat optimization on `num_seeds` independent
/// simulators (seeds `config.rng_seed + i`) in parallel.
pub fn run_regret_experiment(
    spec: &SimulatorSpec,
    config: &Config,
    num_seeds: usize,
    horizon: usize,
) -> Result<RegretExperiment> {
    if num_seeds == 0 {
        return Err(Error::Domain("num_seeds must be ≥ 1".into()));
    }
    spec.validate()?;
    let config = Config { horizon, ..config.clone() };
    let seeds: Vec<u64> = (0..num_seeds as u64).map(|i| config.rng_seed.wrapping_add(i)).collect();

    type SeedRun = (RegretSeries, Option<f64>);
    let run = |seed: u64, clustering: Clustering| -> Result<SeedRun> {
        let mut sim = sim_build(spec.clone(), seed)?.with_clip_floor(config.reward_clip_floor);
        let result = run_optimization_with(&config, &mut sim, seed, RunOptions { clustering, record_state: false })?;
        let regret = result.regret.expect("simulators know the optimum");
        Ok((regret, result.profile_error))
    };
    let runs: Vec<(SeedRun, SeedRun)> = seeds
        .par_iter()
        .map(|&seed| Ok((run(seed, Clustering::Hierarchical)?, run(seed, Clustering::Flat)?)))
        .collect::<Result<_>>()?;
    let (hier, flat): (Vec<_>, Vec<_>) = runs.into_iter().unzip();

    Ok(RegretExperiment {
        horizon,
        num_strategies: spec.strategies.len(),
        optimal_value: spec.optimal_value(config.reward_clip_floor),
        epsilon_cluster: spec.epsilon_cluster,
        alpha: config.alpha,
        hierarchical: RegretAggregate::from_series(&hier, horizon),
        flat: RegretAggregate::from_series(&flat, horizon),
        seeds,
    })
}
