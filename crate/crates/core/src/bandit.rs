//! Cluster-level reward statistics and three-term UCB arm selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compatibility::{CompatibilityModel, ProfilingFeatures};
use crate::error::{Error, Result};
use crate::model::{CandidatePool, KernelId, Strategy, StrategyId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub n: u64,
    pub mean: f64,
}

/// Empirical means and pull counts per (cluster, strategy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    num_strategies: usize,
    /// Row per cluster label, indexed by strategy id.
    rows: BTreeMap<usize, Vec<ArmStats>>,
    completed: usize,
}

impl BanditState {
    pub fn new(num_strategies: usize) -> Self {
        Self {
            num_strategies,
            rows: BTreeMap::new(),
            completed: 0,
        }
    }

    /// The current round: completed rounds plus one.
    pub fn t(&self) -> usize {
        self.completed + 1
    }

    pub fn completed_rounds(&self) -> usize {
        self.completed
    }

    pub fn num_strategies(&self) -> usize {
        self.num_strategies
    }

    pub fn stats(&self, cluster: usize, s: StrategyId) -> ArmStats {
        self.rows
            .get(&cluster)
            .map(|row| row[s.0])
            .unwrap_or_default()
    }

    pub fn row(&self, cluster: usize) -> Option<&[ArmStats]> {
        self.rows.get(&cluster).map(Vec::as_slice)
    }

    /// Records one reward and closes the round.
    pub fn update_stats(&mut self, cluster: usize, s: StrategyId, reward: f64) {
        let row = self
            .rows
            .entry(cluster)
            .or_insert_with(|| vec![ArmStats::default(); self.num_strategies]);
        let arm = &mut row[s.0];
        arm.n += 1;
        arm.mean += (reward - arm.mean) / arm.n as f64;
        self.completed += 1;
    }

    /// Every pulled (cluster, strategy) pair with its statistics.
    pub fn iter(&self) -> impl Iterator<Item = (usize, StrategyId, ArmStats)> + '_ {
        self.rows.iter().flat_map(|(&c, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, a)| a.n > 0)
                .map(move |(s, a)| (c, StrategyId(s), *a))
        })
    }

    /// Tab-separated `cluster strategy n mean` table of all pulled pairs.
    pub fn dump_table(&self) -> String {
        let mut out = String::from("cluster\tstrategy\tn\tmean\n");
        for (c, s, a) in self.iter() {
            let _ = writeln!(out, "{c}\t{}\t{}\t{}", s.0, a.n, a.mean);
        }
        out
    }
}

/// `μ̂ + sqrt(2 ln t / n) + α ψ`, or `+inf` for an unpulled pair.
///
/// `t` is the round counter (≥ 1); it is taken as a real so the formula can
/// be evaluated at arbitrary points.
pub fn ucb_score(mean: f64, n: u64, t: f64, psi: f64, alpha: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    mean + (2.0 * t.ln() / n as f64).sqrt() + alpha * psi
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmChoice {
    pub kernel_id: KernelId,
    pub strategy_id: StrategyId,
    pub cluster: usize,
    pub score: f64,
}

/// Inputs to [`select_arm`], aligned with the pool's iteration order.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub pool: &'a CandidatePool,
    /// Cluster label of each pooled kernel.
    pub clusters: &'a [usize],
    /// Profiling features of each pooled kernel. May be empty when
    /// `alpha == 0`, since the bias term then vanishes.
    pub features: &'a [ProfilingFeatures],
    pub compat: &'a CompatibilityModel,
    pub alpha: f64,
    pub strategies: &'a [Strategy],
}

struct Candidate {
    score: f64,
    n: u64,
    compile_time: f64,
    kernel: KernelId,
    strategy: StrategyId,
    cluster: usize,
}

impl Candidate {
    /// Higher score, then fewer pulls, then faster compile, then lower ids.
    fn beats(&self, other: &Candidate) -> bool {
        let ord = self
            .score
            .total_cmp(&other.score)
            .then(other.n.cmp(&self.n))
            .then(other.compile_time.total_cmp(&self.compile_time))
            .then(other.kernel.cmp(&self.kernel))
            .then(other.strategy.cmp(&self.strategy));
        ord == Ordering::Greater
    }
}

/// Argmax of the UCB score over every (kernel, strategy) pair in the pool.
pub fn select_arm(state: &BanditState, ctx: &SelectionContext<'_>) -> Result<ArmChoice> {
    if ctx.pool.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    if ctx.strategies.is_empty() {
        return Err(Error::Empty("strategy set"));
    }
    if ctx.clusters.len() != ctx.pool.len() {
        return Err(Error::LengthMismatch { left: ctx.pool.len(), right: ctx.clusters.len() });
    }
    let use_bias = ctx.alpha != 0.0;
    if use_bias && ctx.features.len() != ctx.pool.len() {
        return Err(Error::LengthMismatch { left: ctx.pool.len(), right: ctx.features.len() });
    }

    let t = state.t() as f64;
    let mut best: Option<Candidate> = None;
    for (i, kernel) in ctx.pool.iter().enumerate() {
        let cluster = ctx.clusters[i];
        let row = state.row(cluster);
        for strategy in ctx.strategies {
            let arm = row.map(|r| r[strategy.id.0]).unwrap_or_default();
            let psi = if use_bias {
                ctx.compat.predict(strategy.id, &ctx.features[i])
            } else {
                0.0
            };
            let candidate = Candidate {
                score: ucb_score(arm.mean, arm.n, t, psi, ctx.alpha),
                n: arm.n,
                compile_time: kernel.compile_time,
                kernel: kernel.id,
                strategy: strategy.id,
                cluster,
            };
            if best.as_ref().is_none_or(|b| candidate.beats(b)) {
                best = Some(candidate);
            }
        }
    }
    let best = best.expect("nonempty pool and strategy set");
    Ok(ArmChoice {
        kernel_id: best.kernel,
        strategy_id: best.strategy,
        cluster: best.cluster,
        score: best.score,
    })
}

/// Unpulled (cluster, strategy) pairs among the given cluster labels.
pub fn live_pairs(state: &BanditState, clusters: &[usize], strategies: &[Strategy]) -> Vec<(usize, StrategyId)> {
    let mut labels = clusters.to_vec();
    labels.sort_unstable();
    labels.dedup();
    labels
        .into_iter()
        .flat_map(|c| strategies.iter().map(move |s| (c, s.id)))
        .filter(|&(c, s)| state.stats(c, s).n == 0)
        .collect()
}
