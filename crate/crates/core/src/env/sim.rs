//! Deterministic synthetic environment with known ground truth.
//!
//! Kernels belong to archetypes. Applying strategy `s` to a kernel of
//! archetype `i` draws a true reward `r ~ Normal(μ_is + δ_k, σ_is)`, truncated
//! to at most 0.99, and the child runs `1 - r` times as long as its parent.
//! `δ_k ∈ [-ε_cluster, 0]` is a per-kernel offset, so every kernel's expected
//! reward stays within `ε_cluster` of its archetype's value. Children inherit
//! the parent's archetype unless a mutation is drawn.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Environment, Evaluation, FailureReason, RawWarmStartPair, SeedKernel, TransformOutcome};
use crate::error::{Error, Result};
use crate::model::{
    KernelCandidate, MeasurementRecord, Strategy, StrategyId, ACHIEVED_OCCUPANCY, NUM_COUNTERS,
};

/// Largest true reward a transformation can produce.
pub const MAX_TRUE_REWARD: f64 = 0.99;

/// Archetype means must differ by this many within-archetype standard
/// deviations in at least one runtime dimension.
pub const SEPARATION_SIGMAS: f64 = 10.0;

/// A Normal generator for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGen {
    pub mean: f64,
    #[serde(default)]
    pub std: f64,
}

impl FeatureGen {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.std > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            self.mean + self.std * z
        } else {
            self.mean
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub failure_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchetypeSpec {
    pub name: String,
    pub initial_latency_ms: f64,
    /// Expected true reward per strategy.
    pub mean_reward: Vec<f64>,
    /// Reward standard deviation per strategy; empty means noiseless.
    #[serde(default)]
    pub noise_std: Vec<f64>,
    /// Per-strategy failure probability overriding the strategy default.
    #[serde(default)]
    pub failure_prob: Vec<f64>,
    /// Natural log of the footprint in bytes.
    pub log_mem_footprint: FeatureGen,
    pub arithmetic_intensity: FeatureGen,
    pub block_dim_x: FeatureGen,
    pub block_dim_y: FeatureGen,
    /// One generator per counter, in `COUNTER_NAMES` order.
    pub counters: Vec<FeatureGen>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompileTimeRange {
    pub min: f64,
    pub max: f64,
}

impl Default for CompileTimeRange {
    fn default() -> Self {
        Self { min: 50.0, max: 150.0 }
    }
}

fn default_warmup_reps() -> usize {
    100
}

fn default_timed_reps() -> usize {
    1000
}

fn default_seeds() -> Vec<usize> {
    vec![0]
}

/// Ground truth of a synthetic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSpec {
    pub strategies: Vec<StrategySpec>,
    pub archetypes: Vec<ArchetypeSpec>,
    /// Maximum downward deviation of a kernel's expected reward from its
    /// archetype's value.
    #[serde(default)]
    pub epsilon_cluster: f64,
    /// Relative standard deviation of one timed repetition.
    #[serde(default)]
    pub measurement_noise: f64,
    #[serde(default = "default_warmup_reps")]
    pub warmup_reps: usize,
    #[serde(default = "default_timed_reps")]
    pub timed_reps: usize,
    /// Probability that a child switches to a uniformly drawn archetype.
    #[serde(default)]
    pub mutation_prob: f64,
    #[serde(default)]
    pub compile_time_ms: CompileTimeRange,
    /// Archetype of each initial kernel; the first one is k0.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<usize>,
}

impl SimulatorSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SimulatorSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Three archetypes, five strategies, noiseless: the reference setting for
    /// regret experiments.
    pub fn reference() -> Self {
        Self::from_toml_str(include_str!("../../specs/reference.toml"))
            .expect("bundled reference spec is valid")
    }

    /// A setting where one counter per strategy separates success from
    /// failure, so a trained compatibility prior is informative.
    pub fn profiling_prior() -> Self {
        Self::from_toml_str(include_str!("../../specs/profiling_prior.toml"))
            .expect("bundled profiling spec is valid")
    }

    pub fn num_archetypes(&self) -> usize {
        self.archetypes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let s = self.strategies.len();
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if s == 0 {
            v.push("at least one strategy is required".to_string());
        }
        if self.archetypes.is_empty() {
            v.push("at least one archetype is required".to_string());
        }
        for st in &self.strategies {
            if !prob(st.failure_prob) {
                v.push(format!("strategy {:?}: failure_prob must be in [0, 1]", st.name));
            }
        }
        for a in &self.archetypes {
            let name = &a.name;
            if !(a.initial_latency_ms > 0.0 && a.initial_latency_ms.is_finite()) {
                v.push(format!("archetype {name:?}: initial_latency_ms must be > 0"));
            }
            if a.mean_reward.len() != s {
                v.push(format!("archetype {name:?}: mean_reward needs {s} entries"));
            }
            if a.mean_reward.iter().any(|m| !(-1.0..=1.0).contains(m)) {
                v.push(format!("archetype {name:?}: mean_reward entries must be in [-1, 1]"));
            }
            if !a.noise_std.is_empty() && a.noise_std.len() != s {
                v.push(format!("archetype {name:?}: noise_std needs 0 or {s} entries"));
            }
            if a.noise_std.iter().any(|x| !(*x >= 0.0)) {
                v.push(format!("archetype {name:?}: noise_std entries must be ≥ 0"));
            }
            if !a.failure_prob.is_empty() && a.failure_prob.len() != s {
                v.push(format!("archetype {name:?}: failure_prob needs 0 or {s} entries"));
            }
            if a.failure_prob.iter().any(|p| !prob(*p)) {
                v.push(format!("archetype {name:?}: failure_prob entries must be in [0, 1]"));
            }
            if a.counters.len() != NUM_COUNTERS {
                v.push(format!("archetype {name:?}: counters needs {NUM_COUNTERS} generators"));
            }
            let gens = [a.log_mem_footprint, a.arithmetic_intensity, a.block_dim_x, a.block_dim_y]
                .into_iter()
                .chain(a.counters.iter().copied());
            for g in gens {
                if !(g.std >= 0.0) || !g.mean.is_finite() {
                    v.push(format!("archetype {name:?}: generators need finite mean and std ≥ 0"));
                    break;
                }
            }
        }
        if !(self.epsilon_cluster >= 0.0) {
            v.push("epsilon_cluster must be ≥ 0".into());
        }
        if !(self.measurement_noise >= 0.0) {
            v.push("measurement_noise must be ≥ 0".into());
        }
        if self.timed_reps == 0 {
            v.push("timed_reps must be ≥ 1".into());
        }
        if !prob(self.mutation_prob) {
            v.push("mutation_prob must be in [0, 1]".into());
        }
        let ct = self.compile_time_ms;
        if !(ct.min >= 0.0 && ct.min <= ct.max && ct.max.is_finite()) {
            v.push("compile_time_ms needs 0 ≤ min ≤ max".into());
        }
        if self.seeds.is_empty() {
            v.push("at least one seed kernel is required".into());
        }
        if self.seeds.iter().any(|&i| i >= self.archetypes.len()) {
            v.push("seeds must name existing archetypes".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn failure_prob(&self, archetype: usize, s: usize) -> f64 {
        let a = &self.archetypes[archetype];
        if a.failure_prob.is_empty() {
            self.strategies[s].failure_prob
        } else {
            a.failure_prob[s]
        }
    }

    fn noise_std(&self, archetype: usize, s: usize) -> f64 {
        self.archetypes[archetype].noise_std.get(s).copied().unwrap_or(0.0)
    }

    /// Archetypes the pool can contain.
    pub fn reachable_archetypes(&self) -> Vec<usize> {
        if self.mutation_prob > 0.0 {
            return (0..self.archetypes.len()).collect();
        }
        let mut r = self.seeds.clone();
        r.sort_unstable();
        r.dedup();
        r
    }

    /// Expected observed reward of applying `s` to a kernel of archetype `i`
    /// with zero offset, under failure penalty `-1` and clipping at
    /// `clip_floor`. Exact when measurement noise is zero.
    pub fn arm_value(&self, archetype: usize, s: usize, clip_floor: f64) -> f64 {
        let p = self.failure_prob(archetype, s);
        let mu = self.archetypes[archetype].mean_reward[s];
        let sigma = self.noise_std(archetype, s);
        let success = clamped_normal_mean(mu, sigma, clip_floor, MAX_TRUE_REWARD);
        (1.0 - p) * success - p
    }

    /// Best arm value over reachable archetypes.
    pub fn optimal_value(&self, clip_floor: f64) -> f64 {
        self.reachable_archetypes()
            .into_iter()
            .flat_map(|i| (0..self.strategies.len()).map(move |s| (i, s)))
            .map(|(i, s)| self.arm_value(i, s, clip_floor))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Probability of a strictly positive reward for archetype `i`, strategy
    /// `s` and reward offset `offset`.
    pub fn success_probability(&self, archetype: usize, s: usize, offset: f64) -> f64 {
        let p = self.failure_prob(archetype, s);
        let mu = (self.archetypes[archetype].mean_reward[s] + offset).min(MAX_TRUE_REWARD);
        let sigma = self.noise_std(archetype, s);
        let positive = if sigma > 0.0 {
            1.0 - normal_cdf(-mu / sigma)
        } else if mu > 0.0 {
            1.0
        } else {
            0.0
        };
        (1.0 - p) * positive
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[clamp(X, lo, hi)]` for `X ~ Normal(mu, sigma)`.
fn clamped_normal_mean(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    if !(sigma > 0.0) {
        return mu.clamp(lo, hi);
    }
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let (pa, pb) = (normal_cdf(a), normal_cdf(b));
    let lower = if lo.is_finite() { lo * pa } else { 0.0 };
    lower + hi * (1.0 - pb) + mu * (pb - pa) + sigma * (normal_pdf(a) - normal_pdf(b))
}

/// True if every pair of archetypes is at least [`SEPARATION_SIGMAS`]
/// within-archetype standard deviations apart in at least one runtime
/// dimension (footprint, intensity, block dimensions, occupancy).
pub fn sim_archetype_separation_check(spec: &SimulatorSpec) -> bool {
    let dims = |a: &ArchetypeSpec| {
        [
            a.log_mem_footprint,
            a.arithmetic_intensity,
            a.block_dim_x,
            a.block_dim_y,
            a.counters.get(ACHIEVED_OCCUPANCY).copied().unwrap_or(FeatureGen { mean: 0.0, std: 0.0 }),
        ]
    };
    let archetypes = &spec.archetypes;
    for i in 0..archetypes.len() {
        for j in i + 1..archetypes.len() {
            let separated = dims(&archetypes[i])
                .iter()
                .zip(dims(&archetypes[j]).iter())
                .any(|(a, b)| {
                    let gap = (a.mean - b.mean).abs();
                    gap > 0.0 && gap >= SEPARATION_SIGMAS * a.std.max(b.std)
                });
            if !separated {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone)]
struct HiddenKernel {
    archetype: usize,
    true_latency: f64,
    offset: f64,
    mem_footprint: f64,
    arithmetic_intensity: f64,
    block_dim_x: u32,
    block_dim_y: u32,
    counters: [f64; NUM_COUNTERS],
    compile_time: f64,
}

/// Synthetic [`Environment`] driven by a [`SimulatorSpec`].
#[derive(Debug, Clone)]
pub struct Simulator {
    spec: SimulatorSpec,
    strategies: Vec<Strategy>,
    rng: ChaCha8Rng,
    kernels: HashMap<String, HiddenKernel>,
    next_token: u64,
    clip_floor: f64,
}

/// Builds a simulator whose every random draw derives from `seed`.
pub fn sim_build(spec: SimulatorSpec, seed: u64) -> Result<Simulator> {
    spec.validate()?;
    let strategies = spec
        .strategies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let description = if s.description.is_empty() { s.name.clone() } else { s.description.clone() };
            Strategy::new(i, s.name.clone(), description)
        })
        .collect();
    Ok(Simulator {
        spec,
        strategies,
        rng: ChaCha8Rng::seed_from_u64(seed),
        kernels: HashMap::new(),
        next_token: 0,
        clip_floor: -1.0,
    })
}

impl Simulator {
    pub fn spec(&self) -> &SimulatorSpec {
        &self.spec
    }

    /// Clip floor used when reporting arm values (defaults to -1).
    pub fn with_clip_floor(mut self, clip_floor: f64) -> Self {
        self.clip_floor = clip_floor;
        self
    }

    /// Archetype of a simulated kernel, by source token.
    pub fn archetype_of(&self, source: &str) -> Option<usize> {
        self.kernels.get(source).map(|k| k.archetype)
    }

    /// Expected reward of applying `s` to the kernel behind `source`.
    pub fn expected_reward(&self, source: &str, s: StrategyId) -> Option<f64> {
        let k = self.kernels.get(source)?;
        Some(self.spec.arm_value(k.archetype, s.0, self.clip_floor) + k.offset)
    }

    fn spawn(&mut self, archetype: usize, true_latency: f64) -> String {
        let spec = &self.spec;
        let a = &spec.archetypes[archetype];
        let rng = &mut self.rng;
        let offset = if spec.epsilon_cluster > 0.0 {
            -rng.random_range(0.0..=spec.epsilon_cluster)
        } else {
            0.0
        };
        let dim = |g: &FeatureGen, rng: &mut ChaCha8Rng| g.sample(rng).round().max(1.0) as u32;
        let mem_footprint = a.log_mem_footprint.sample(rng).exp().max(f64::MIN_POSITIVE);
        let arithmetic_intensity = a.arithmetic_intensity.sample(rng).max(0.0);
        let block_dim_x = dim(&a.block_dim_x, rng);
        let block_dim_y = dim(&a.block_dim_y, rng);
        let mut counters = [0.0; NUM_COUNTERS];
        for (c, g) in counters.iter_mut().zip(&a.counters) {
            *c = g.sample(rng).max(0.0);
        }
        counters[ACHIEVED_OCCUPANCY] = counters[ACHIEVED_OCCUPANCY].min(1.0);
        let ct = spec.compile_time_ms;
        let compile_time = if ct.max > ct.min { rng.random_range(ct.min..ct.max) } else { ct.min };

        let token = format!("sim-kernel-{}", self.next_token);
        self.next_token += 1;
        self.kernels.insert(
            token.clone(),
            HiddenKernel {
                archetype,
                true_latency,
                offset,
                mem_footprint,
                arithmetic_intensity,
                block_dim_x,
                block_dim_y,
                counters,
                compile_time,
            },
        );
        token
    }

    fn draw_reward(&mut self, archetype: usize, s: usize, offset: f64) -> f64 {
        let mu = self.spec.archetypes[archetype].mean_reward[s] + offset;
        let sigma = self.spec.noise_std(archetype, s);
        let r = if sigma > 0.0 {
            Normal::new(mu, sigma).expect("validated std").sample(&mut self.rng)
        } else {
            mu
        };
        r.min(MAX_TRUE_REWARD)
    }

    fn measure_latency(&mut self, true_latency: f64) -> f64 {
        let noise = self.spec.measurement_noise;
        if noise == 0.0 {
            return true_latency;
        }
        let rep = |rng: &mut ChaCha8Rng| {
            let z: f64 = StandardNormal.sample(rng);
            true_latency * (1.0 + noise * z).max(1e-3)
        };
        for _ in 0..self.spec.warmup_reps {
            rep(&mut self.rng);
        }
        let reps = self.spec.timed_reps;
        (0..reps).map(|_| rep(&mut self.rng)).sum::<f64>() / reps as f64
    }
}

impl Environment for Simulator {
    fn strategies(&self) -> &[Strategy] {
        &self.strategies
    }

    fn seed_kernels(&mut self) -> Result<Vec<SeedKernel>> {
        let seeds = self.spec.seeds.clone();
        seeds
            .into_iter()
            .map(|archetype| {
                let latency = self.spec.archetypes[archetype].initial_latency_ms;
                let source = self.spawn(archetype, latency);
                let evaluation = self.evaluate(&source)?;
                Ok(SeedKernel { source, evaluation })
            })
            .collect()
    }

    fn transform(&mut self, parent: &KernelCandidate, strategy: &Strategy) -> TransformOutcome {
        let Some(hidden) = self.kernels.get(&parent.source) else {
            return TransformOutcome::Failed(FailureReason::Generation);
        };
        let (archetype, latency, offset) = (hidden.archetype, hidden.true_latency, hidden.offset);
        let s = strategy.id.0;
        if self.rng.random::<f64>() < self.spec.failure_prob(archetype, s) {
            return TransformOutcome::Failed(FailureReason::Compile);
        }
        let reward = self.draw_reward(archetype, s, offset);
        let child_archetype =
            if self.spec.mutation_prob > 0.0 && self.rng.random::<f64>() < self.spec.mutation_prob {
                self.rng.random_range(0..self.spec.archetypes.len())
            } else {
                archetype
            };
        let source = self.spawn(child_archetype, latency * (1.0 - reward));
        TransformOutcome::Generated { source }
    }

    fn evaluate(&mut self, source: &str) -> Result<Evaluation> {
        let hidden = self
            .kernels
            .get(source)
            .cloned()
            .ok_or_else(|| Error::Environment(format!("unknown simulated kernel {source:?}")))?;
        let latency = self.measure_latency(hidden.true_latency);
        Ok(Evaluation {
            measurement: MeasurementRecord {
                latency,
                mem_footprint: hidden.mem_footprint,
                arithmetic_intensity: hidden.arithmetic_intensity,
                block_dim_x: hidden.block_dim_x,
                block_dim_y: hidden.block_dim_y,
                counters: hidden.counters,
                correctness_passed: true,
            },
            compile_time: hidden.compile_time,
        })
    }

    /// Random search: uniformly drawn reachable archetype and strategy, one
    /// simulated outcome each.
    fn warm_start_pairs(&mut self, count: usize) -> Vec<RawWarmStartPair> {
        let archetypes = self.spec.reachable_archetypes();
        (0..count)
            .map(|_| {
                let archetype = archetypes[self.rng.random_range(0..archetypes.len())];
                let s = self.rng.random_range(0..self.strategies.len());
                let token = self.spawn(archetype, 1.0);
                let hidden = self.kernels.remove(&token).expect("just spawned");
                let failed = self.rng.random::<f64>() < self.spec.failure_prob(archetype, s);
                let label = !failed && self.draw_reward(archetype, s, hidden.offset) > 0.0;
                RawWarmStartPair { strategy: StrategyId(s), counters: hidden.counters, label }
            })
            .collect()
    }

    fn optimal_value(&self) -> Option<f64> {
        Some(self.spec.optimal_value(self.clip_floor))
    }

    fn success_probability(&self, source: &str, strategy: StrategyId) -> Option<f64> {
        let k = self.kernels.get(source)?;
        Some(self.spec.success_probability(k.archetype, strategy.0, k.offset))
    }
}
