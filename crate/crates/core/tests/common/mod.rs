//! Independent reference implementations shared by the oracle and
//! acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kerneltune::bandit::{select_arm, BanditState, SelectionContext};
use kerneltune::clustering::{lloyd_iterate, seed_centroids_kmeanspp_with};
use kerneltune::compatibility::{logistic_loss_gradient, CompatibilityModel, ProfilingFeatures};
use kerneltune::model::NUM_COUNTERS;
use kerneltune::{CandidatePool, KernelCandidate, KernelId, MeasurementRecord, Strategy, StrategyId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// WCSS of a labelling with centroids at member means.
pub fn partition_wcss<const D: usize>(points: &[[f64; D]], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&[f64; D]> = points.iter().zip(labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..D).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
        total += members.iter().map(|p| sq(&p[..], &mean)).sum::<f64>();
    }
    total
}

/// Minimum WCSS over every labelling of the points into `k` non-empty groups.
pub fn exhaustive_wcss<const D: usize>(points: &[[f64; D]], k: usize) -> f64 {
    let n = points.len();
    assert!(n <= 10, "exhaustive search is exponential");
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        if (0..k).all(|g| labels.contains(&g)) {
            best = best.min(partition_wcss(points, &labels, k));
        }
    }
    best
}

/// Same grouping up to relabelling.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

/// Three Gaussian triples in 6 dimensions, centres ~100 apart, spread 1.
pub fn separated_triples(rng: &mut ChaCha8Rng) -> (Vec<[f64; 6]>, Vec<usize>) {
    let mut points = Vec::new();
    let mut groups = Vec::new();
    for g in 0..3 {
        let centre: [f64; 6] = std::array::from_fn(|d| if d == g { 100.0 } else { 0.0 } + rng.random_range(-5.0..5.0));
        for _ in 0..3 {
            points.push(std::array::from_fn(|d| centre[d] + rng.random_range(-1.0..1.0)));
            groups.push(g);
        }
    }
    (points, groups)
}

/// k-means (full-sample k-means++ seeding, then Lloyd) against exhaustive
/// enumeration on `trials` random instances. Returns the largest relative
/// WCSS gap.
pub fn kmeans_vs_exhaustive(trials: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let (points, groups) = separated_triples(&mut r);
        let seeds = seed_centroids_kmeanspp_with(&points, 3, 1.0, &mut r);
        let (assignment, _) = lloyd_iterate(&points, seeds);
        let got = partition_wcss(&points, &assignment, 3);
        let best = exhaustive_wcss(&points, 3);
        let gap = (got - best).abs() / best;
        worst = worst.max(gap);
        if gap > 1e-9 {
            return Err(format!("trial {trial}: WCSS {got} vs optimum {best}"));
        }
        if !same_partition(&assignment, &groups) {
            return Err(format!("trial {trial}: partition differs from generation groups"));
        }
    }
    Ok(worst)
}

/// Mean log-loss plus `λ/2 ‖w‖²`, evaluated directly.
pub fn regularized_log_loss(w: &[f64; NUM_COUNTERS], b: f64, batch: &[(ProfilingFeatures, bool)], l2: f64) -> f64 {
    let mut loss = 0.0;
    for (phi, y) in batch {
        let z: f64 = w.iter().zip(&phi.0).map(|(a, x)| a * x).sum::<f64>() + b;
        // log(1 + e^z) computed stably.
        let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        loss += if *y { softplus(-z) } else { softplus(z) };
    }
    loss / batch.len() as f64 + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>()
}

fn random_batch(r: &mut ChaCha8Rng, n: usize) -> Vec<(ProfilingFeatures, bool)> {
    (0..n)
        .map(|_| (ProfilingFeatures(std::array::from_fn(|_| r.random::<f64>())), r.random::<bool>()))
        .collect()
}

/// Analytic gradient against central differences with step 1e-6 on `draws`
/// random (parameters, batch, λ). Returns the largest relative error
/// (vector norm).
pub fn gradient_vs_finite_differences(draws: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let w: [f64; NUM_COUNTERS] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let b = r.random_range(-2.0..2.0);
        let l2 = r.random_range(0.0..0.1);
        let n = r.random_range(1..40);
        let batch = random_batch(&mut r, n);
        let (gw, gb) = logistic_loss_gradient(&w, b, &batch, l2).map_err(|e| e.to_string())?;
        let mut fd = [0.0; NUM_COUNTERS + 1];
        for i in 0..NUM_COUNTERS {
            let (mut up, mut down) = (w, w);
            up[i] += h;
            down[i] -= h;
            fd[i] = (regularized_log_loss(&up, b, &batch, l2) - regularized_log_loss(&down, b, &batch, l2)) / (2.0 * h);
        }
        fd[NUM_COUNTERS] =
            (regularized_log_loss(&w, b + h, &batch, l2) - regularized_log_loss(&w, b - h, &batch, l2)) / (2.0 * h);
        let analytic: Vec<f64> = gw.iter().copied().chain([gb]).collect();
        let diff = sq(&analytic, &fd).sqrt();
        let scale = sq(&analytic, &[0.0; NUM_COUNTERS + 1]).sqrt().max(sq(&fd, &[0.0; NUM_COUNTERS + 1]).sqrt());
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
        if rel >= 1e-5 {
            return Err(format!("draw {draw}: relative error {rel:e}"));
        }
    }
    Ok(worst)
}

pub fn strategies(n: usize) -> Vec<Strategy> {
    (0..n).map(|i| Strategy::new(i, format!("s{i}"), format!("strategy {i}"))).collect()
}

pub fn measured_kernel(id: u64, compile_time: f64) -> KernelCandidate {
    KernelCandidate {
        id: KernelId(id),
        parent_id: None,
        applied_strategy: None,
        source: format!("k{id}"),
        measurement: Some(MeasurementRecord {
            latency: 1.0,
            mem_footprint: 1.0,
            arithmetic_intensity: 1.0,
            block_dim_x: 1,
            block_dim_y: 1,
            counters: [0.0; NUM_COUNTERS],
            correctness_passed: true,
        }),
        valid: true,
        compile_time,
    }
}

/// Exhaustive argmax by sorting every (kernel, strategy) pair on the full
/// ordering key. Scores are recomputed from the raw statistics and head
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_select(
    pool: &CandidatePool,
    clusters: &[usize],
    features: &[ProfilingFeatures],
    state: &BanditState,
    compat: &CompatibilityModel,
    alpha: f64,
    strategies: &[Strategy],
) -> (KernelId, StrategyId, f64) {
    let t = state.t() as f64;
    let mut all = Vec::new();
    for (i, k) in pool.iter().enumerate() {
        for s in strategies {
            let arm = state.stats(clusters[i], s.id);
            let psi = if alpha == 0.0 {
                0.0
            } else {
                let head = compat.head(s.id);
                let z: f64 = head.weights.iter().zip(&features[i].0).map(|(w, x)| w * x).sum::<f64>() + head.bias;
                1.0 / (1.0 + (-z).exp())
            };
            let score = if arm.n == 0 {
                f64::INFINITY
            } else {
                arm.mean + (2.0 * t.ln() / arm.n as f64).sqrt() + alpha * psi
            };
            all.push((score, arm.n, k.compile_time, k.id, s.id));
        }
    }
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.partial_cmp(&b.2).unwrap())
            .then(a.3.cmp(&b.3))
            .then(a.4.cmp(&b.4))
    });
    (all[0].3, all[0].4, all[0].0)
}

/// `select_arm` against [`brute_force_select`] on random states with every
/// arm pulled at least once. Compile times and cluster labels are drawn from
/// small sets so that ties occur.
pub fn select_arm_vs_brute_force(states: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..states {
        let num_s = r.random_range(1..6);
        let strategies = strategies(num_s);
        let n_kernels = r.random_range(1..10);
        let mut pool = CandidatePool::new();
        for id in 0..n_kernels {
            pool.insert(measured_kernel(id, [1.0, 2.0, 3.0][r.random_range(0..3)])).map_err(|e| e.to_string())?;
        }
        let clusters: Vec<usize> = (0..n_kernels).map(|_| r.random_range(0..3)).collect();
        let mut state = BanditState::new(num_s);
        for &c in &clusters {
            for s in &strategies {
                if state.stats(c, s.id).n == 0 {
                    state.update_stats(c, s.id, r.random_range(-1.0..1.0));
                }
            }
        }
        for _ in 0..r.random_range(0..30) {
            let c = clusters[r.random_range(0..clusters.len())];
            // Coarse rewards make equal means, and so equal scores, likely.
            let reward = [-1.0, 0.0, 0.5][r.random_range(0..3)];
            state.update_stats(c, StrategyId(r.random_range(0..num_s)), reward);
        }
        let mut compat = CompatibilityModel::new(num_s, 500, 0.1, 1e-4);
        for s in &strategies {
            let head = compat.head_mut(s.id);
            head.weights = std::array::from_fn(|_| r.random_range(-3.0..3.0));
            head.bias = r.random_range(-1.0..1.0);
        }
        let features: Vec<ProfilingFeatures> = (0..n_kernels)
            .map(|_| ProfilingFeatures(std::array::from_fn(|_| r.random::<f64>())))
            .collect();
        let alpha = [0.0, 0.5, r.random_range(0.0..2.0)][r.random_range(0..3)];
        let got = select_arm(
            &state,
            &SelectionContext {
                pool: &pool,
                clusters: &clusters,
                features: &features,
                compat: &compat,
                alpha,
                strategies: &strategies,
            },
        )
        .map_err(|e| e.to_string())?;
        let (k, s, score) = brute_force_select(&pool, &clusters, &features, &state, &compat, alpha, &strategies);
        if (got.kernel_id, got.strategy_id) != (k, s) || (got.score - score).abs() > 1e-12 {
            return Err(format!(
                "case {case}: select_arm chose ({}, {}, {}) but brute force chose ({k}, {s}, {score})",
                got.kernel_id, got.strategy_id, got.score
            ));
        }
    }
    Ok(())
}

/// Running means from `update_stats` against plain batch means over 1000
/// random rewards per trial. Returns the largest absolute difference.
pub fn incremental_vs_batch_mean(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let rewards: Vec<f64> = (0..1000).map(|_| r.random_range(-1.0..=1.0)).collect();
        let mut state = BanditState::new(1);
        for x in &rewards {
            state.update_stats(0, StrategyId(0), *x);
        }
        let batch = rewards.iter().sum::<f64>() / rewards.len() as f64;
        worst = worst.max((state.stats(0, StrategyId(0)).mean - batch).abs());
    }
    worst
}
