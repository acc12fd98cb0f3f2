//! Runtime-behaviour clustering of the candidate pool.
//!
//! Kernels are embedded in a 6-dimensional space (log latency, log memory
//! footprint, arithmetic intensity, block dimensions, occupancy), z-scored
//! over the current pool, and partitioned by k-means with k-means++ seeding.
//! Between refreshes new kernels are assigned to the nearest existing
//! centroid; on refresh the partition is recomputed and new centroids are
//! matched to old labels so that per-cluster bandit statistics stay attached
//! to the same behaviour group.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KernelId, MeasurementRecord};

pub const RUNTIME_DIMS: usize = 6;

/// Lloyd iterations stop here even if assignments still change.
pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Fraction of the pool used for k-means++ seeding.
pub const SEED_SUBSAMPLE_FRACTION: f64 = 0.1;

pub type RuntimePoint = [f64; RUNTIME_DIMS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeFeatures {
    pub raw: RuntimePoint,
}

pub fn runtime_feature_vector(m: &MeasurementRecord) -> Result<RuntimeFeatures> {
    if !(m.latency > 0.0) {
        return Err(Error::Domain(format!("latency must be positive, got {}", m.latency)));
    }
    if !(m.mem_footprint > 0.0) {
        return Err(Error::Domain(format!(
            "memory footprint must be positive, got {}",
            m.mem_footprint
        )));
    }
    let raw = [
        m.latency.ln(),
        m.mem_footprint.ln(),
        m.arithmetic_intensity,
        f64::from(m.block_dim_x),
        f64::from(m.block_dim_y),
        m.achieved_occupancy(),
    ];
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite runtime features {raw:?}")));
    }
    Ok(RuntimeFeatures { raw })
}

/// Per-dimension population mean and standard deviation.
///
/// Dimensions whose values are all identical are flagged constant and
/// normalise to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScore<const D: usize> {
    mean: [f64; D],
    std: [f64; D],
    constant: [bool; D],
}

impl<const D: usize> ZScore<D> {
    pub fn fit(vectors: &[[f64; D]]) -> Result<Self> {
        let first = vectors.first().ok_or(Error::Empty("zscore input"))?;
        let n = vectors.len() as f64;
        let mut mean = [0.0; D];
        let mut std = [0.0; D];
        let mut constant = [true; D];
        for d in 0..D {
            constant[d] = vectors.iter().all(|v| v[d] == first[d]);
            if constant[d] {
                continue;
            }
            mean[d] = vectors.iter().map(|v| v[d]).sum::<f64>() / n;
            let var = vectors.iter().map(|v| (v[d] - mean[d]).powi(2)).sum::<f64>() / n;
            std[d] = var.sqrt();
            if !(std[d] > 0.0) {
                constant[d] = true;
            }
        }
        Ok(Self { mean, std, constant })
    }

    pub fn apply(&self, v: &[f64; D]) -> [f64; D] {
        std::array::from_fn(|d| {
            if self.constant[d] {
                0.0
            } else {
                (v[d] - self.mean[d]) / self.std[d]
            }
        })
    }
}

/// Zero-mean, unit-variance scaling of every dimension over the given set.
pub fn zscore_normalize<const D: usize>(vectors: &[[f64; D]]) -> Result<Vec<[f64; D]>> {
    let stats = ZScore::fit(vectors)?;
    Ok(vectors.iter().map(|v| stats.apply(v)).collect())
}

pub fn squared_distance<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn assign<const D: usize>(point: &[f64; D], centroids: &[[f64; D]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Within-cluster sum of squared distances.
pub fn wcss<const D: usize>(points: &[[f64; D]], assignment: &[usize], centroids: &[[f64; D]]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if acc > target {
                return i;
            }
        }
    }
    last_positive
}

/// k-means++ seeding on a uniform random subsample of `max(ceil(0.1 N), k)`
/// points.
///
/// Returns fewer than `k` centroids when the subsample has fewer than `k`
/// distinct points.
pub fn seed_centroids_kmeanspp<const D: usize, R: Rng + ?Sized>(
    points: &[[f64; D]],
    k: usize,
    rng: &mut R,
) -> Vec<[f64; D]> {
    extend_centroids_kmeanspp(points, Vec::new(), k, rng)
}

/// k-means++ seeding on a subsample of `max(ceil(fraction N), k)` points;
/// `fraction = 1` seeds from the full set.
pub fn seed_centroids_kmeanspp_with<const D: usize, R: Rng + ?Sized>(
    points: &[[f64; D]],
    k: usize,
    fraction: f64,
    rng: &mut R,
) -> Vec<[f64; D]> {
    extend_with_fraction(points, Vec::new(), k, fraction, rng)
}

/// Continues k-means++ seeding from `initial` until `k` centroids exist.
///
/// Each new centroid is the best of `2 + ln k` D²-weighted draws, judged by
/// the resulting potential (greedy k-means++).
pub fn extend_centroids_kmeanspp<const D: usize, R: Rng + ?Sized>(
    points: &[[f64; D]],
    initial: Vec<[f64; D]>,
    k: usize,
    rng: &mut R,
) -> Vec<[f64; D]> {
    extend_with_fraction(points, initial, k, SEED_SUBSAMPLE_FRACTION, rng)
}

fn extend_with_fraction<const D: usize, R: Rng + ?Sized>(
    points: &[[f64; D]],
    initial: Vec<[f64; D]>,
    k: usize,
    fraction: f64,
    rng: &mut R,
) -> Vec<[f64; D]> {
    let mut centroids = initial;
    if points.is_empty() || k == 0 || centroids.len() >= k {
        return centroids;
    }
    let n = points.len();
    let m = ((fraction * n as f64).ceil() as usize).max(k).min(n);
    let sample: Vec<[f64; D]> = index::sample(rng, n, m).iter().map(|i| points[i]).collect();

    if centroids.is_empty() {
        centroids.push(sample[rng.random_range(0..sample.len())]);
    }
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut nearest: Vec<f64> = sample
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| squared_distance(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..trials {
            let candidate = sample_weighted(&nearest, total, rng);
            let potential: f64 = sample
                .iter()
                .zip(&nearest)
                .map(|(p, &d)| d.min(squared_distance(p, &sample[candidate])))
                .sum();
            if best.is_none_or(|(b, _)| potential < b) {
                best = Some((potential, candidate));
            }
        }
        let (_, chosen) = best.expect("at least one trial");
        let c = sample[chosen];
        for (p, d) in sample.iter().zip(nearest.iter_mut()) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn recompute_centroids<const D: usize>(
    points: &[[f64; D]],
    assignment: &[usize],
    previous: &[[f64; D]],
) -> Vec<[f64; D]> {
    let k = previous.len();
    let mut sums = vec![[0.0; D]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for d in 0..D {
            sums[c][d] += p[d];
        }
    }
    let mut centroids: Vec<[f64; D]> = sums
        .iter()
        .zip(&counts)
        .zip(previous)
        .map(|((s, &n), prev)| {
            if n == 0 {
                *prev
            } else {
                std::array::from_fn(|d| s[d] / n as f64)
            }
        })
        .collect();

    // Empty clusters take the points farthest from their own centroid.
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut by_distance: Vec<(f64, usize)> = points
            .iter()
            .zip(assignment)
            .enumerate()
            .map(|(i, (p, &c))| (squared_distance(p, &centroids[c]), i))
            .collect();
        by_distance.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (slot, (dist, i)) in empty.into_iter().zip(by_distance) {
            if dist > 0.0 {
                centroids[slot] = points[i];
            }
        }
    }
    centroids
}

/// Alternates nearest-centroid assignment and mean updates until the
/// assignment stops changing or [`MAX_LLOYD_ITERATIONS`] is reached.
///
/// The returned assignment is always nearest-centroid with respect to the
/// returned centroids.
pub fn lloyd_iterate<const D: usize>(
    points: &[[f64; D]],
    centroids: Vec<[f64; D]>,
) -> (Vec<usize>, Vec<[f64; D]>) {
    assert!(!centroids.is_empty(), "lloyd_iterate needs at least one centroid");
    let assign_all =
        |cs: &[[f64; D]]| points.iter().map(|p| assign(p, cs)).collect::<Vec<_>>();
    let mut centroids = centroids;
    let mut assignment = assign_all(&centroids);
    for _ in 0..MAX_LLOYD_ITERATIONS {
        centroids = recompute_centroids(points, &assignment, &centroids);
        let next = assign_all(&centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    (assignment, centroids)
}

pub fn refresh_due(
    t: usize,
    last_refresh_round: usize,
    pool_size: usize,
    pool_size_at_refresh: usize,
    interval: usize,
) -> bool {
    t.saturating_sub(last_refresh_round) >= interval || pool_size >= 2 * pool_size_at_refresh
}

/// Labels for `new` centroids that minimise the summed distance to the `old`
/// centroids they inherit from.
///
/// `result[j]` is the index of the old centroid matched to new centroid `j`.
/// When there are more new centroids than old, the unmatched ones receive
/// fresh labels `old.len()`, `old.len() + 1`, ... in index order. All
/// injective matchings are enumerated, so this is meant for small K.
pub fn match_centroid_labels<const D: usize>(old: &[[f64; D]], new: &[[f64; D]]) -> Vec<usize> {
    let cost = |i: usize, j: usize| squared_distance(&old[i], &new[j]).sqrt();

    // Enumerate injections from the smaller side into the larger one.
    let (small, large) = (old.len().min(new.len()), old.len().max(new.len()));
    let old_is_small = old.len() <= new.len();
    let mut best_map: Vec<usize> = (0..small).collect();
    let mut best_cost = f64::INFINITY;
    let mut current = Vec::with_capacity(small);
    let mut used = vec![false; large];

    #[allow(clippy::too_many_arguments)]
    fn search(
        depth: usize,
        small: usize,
        large: usize,
        acc: f64,
        current: &mut Vec<usize>,
        used: &mut [bool],
        pair_cost: &dyn Fn(usize, usize) -> f64,
        best_cost: &mut f64,
        best_map: &mut Vec<usize>,
    ) {
        if depth == small {
            if acc < *best_cost {
                *best_cost = acc;
                best_map.clone_from(current);
            }
            return;
        }
        for target in 0..large {
            if used[target] {
                continue;
            }
            used[target] = true;
            current.push(target);
            let c = acc + pair_cost(depth, target);
            search(depth + 1, small, large, c, current, used, pair_cost, best_cost, best_map);
            current.pop();
            used[target] = false;
        }
    }

    let pair_cost = |s: usize, l: usize| if old_is_small { cost(s, l) } else { cost(l, s) };
    search(0, small, large, 0.0, &mut current, &mut used, &pair_cost, &mut best_cost, &mut best_map);

    if old_is_small {
        // best_map[old] = new index
        let mut labels = vec![usize::MAX; new.len()];
        for (o, &n) in best_map.iter().enumerate() {
            labels[n] = o;
        }
        for (fresh, l) in (old.len()..).zip(labels.iter_mut().filter(|l| **l == usize::MAX)) {
            *l = fresh;
        }
        labels
    } else {
        // best_map[new] = old index
        best_map
    }
}

/// Incrementally maintained partition of the pool.
///
/// Centroids are stored in raw feature space (as member means) so they can be
/// re-expressed in whatever normalisation the current pool induces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    max_clusters: usize,
    raw_centroids: Vec<RuntimePoint>,
    /// Stable label of each centroid, used to key bandit statistics.
    labels: Vec<usize>,
    assignment: BTreeMap<KernelId, usize>,
    last_refresh_round: usize,
    pool_size_at_refresh: usize,
}

impl ClusterModel {
    pub fn new(max_clusters: usize) -> Self {
        assert!(max_clusters >= 1);
        Self {
            max_clusters,
            raw_centroids: Vec::new(),
            labels: Vec::new(),
            assignment: BTreeMap::new(),
            last_refresh_round: 0,
            pool_size_at_refresh: 0,
        }
    }

    pub fn is_fitted(&self) -> bool {
        !self.raw_centroids.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.raw_centroids.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn last_refresh_round(&self) -> usize {
        self.last_refresh_round
    }

    pub fn pool_size_at_refresh(&self) -> usize {
        self.pool_size_at_refresh
    }

    pub fn cluster_of(&self, id: KernelId) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<KernelId, usize> {
        &self.assignment
    }

    pub fn needs_refresh(&self, t: usize, pool_size: usize, interval: usize) -> bool {
        !self.is_fitted()
            || refresh_due(t, self.last_refresh_round, pool_size, self.pool_size_at_refresh, interval)
    }

    /// Centroids expressed in the given normalisation, in label order of
    /// [`Self::labels`].
    pub fn centroids(&self, stats: &ZScore<RUNTIME_DIMS>) -> Vec<RuntimePoint> {
        self.raw_centroids.iter().map(|c| stats.apply(c)).collect()
    }

    /// Assigns a kernel to the nearest current centroid and returns its label.
    pub fn assign_new(&mut self, id: KernelId, raw: &RuntimePoint, stats: &ZScore<RUNTIME_DIMS>) -> usize {
        let centroids = self.centroids(stats);
        let label = self.labels[assign(&stats.apply(raw), &centroids)];
        self.assignment.insert(id, label);
        label
    }

    /// Recomputes the partition over the whole pool.
    ///
    /// Two candidates are computed: Lloyd warm-started from the current
    /// partition (extended by k-means++ when more clusters are allowed), and
    /// Lloyd from fresh k-means++ seeds. The one with more non-empty clusters
    /// wins, then the one with lower WCSS, with the warm start preferred on
    /// exact ties.
    pub fn refresh<R: Rng + ?Sized>(
        &mut self,
        t: usize,
        ids: &[KernelId],
        raw: &[RuntimePoint],
        rng: &mut R,
    ) -> Result<()> {
        assert_eq!(ids.len(), raw.len());
        let stats = ZScore::fit(raw)?;
        let points: Vec<RuntimePoint> = raw.iter().map(|r| stats.apply(r)).collect();
        let k = self.max_clusters.min(points.len());

        let seeded = seed_centroids_kmeanspp(&points, k, rng);
        let mut best = finish(&points, seeded);

        if self.is_fitted() {
            let warm = self.warm_centroids(ids, &points);
            let warm = extend_centroids_kmeanspp(&points, warm, k, rng);
            let candidate = finish(&points, warm);
            let better = candidate.2.len() > best.2.len()
                || (candidate.2.len() == best.2.len() && candidate.0 <= best.0);
            if better {
                best = candidate;
            }
        }
        let (_, assignment, centroids) = best;

        // Raw centroids are member means.
        let mut sums = vec![[0.0; RUNTIME_DIMS]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (r, &c) in raw.iter().zip(&assignment) {
            counts[c] += 1;
            for d in 0..RUNTIME_DIMS {
                sums[c][d] += r[d];
            }
        }
        let raw_centroids: Vec<RuntimePoint> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| std::array::from_fn(|d| s[d] / n as f64))
            .collect();

        let labels: Vec<usize> = if self.is_fitted() {
            let old = self.centroids(&stats);
            let matched = match_centroid_labels(&old, &centroids);
            let mut used: Vec<usize> = matched
                .iter()
                .filter(|&&m| m < self.labels.len())
                .map(|&m| self.labels[m])
                .collect();
            matched
                .iter()
                .map(|&m| {
                    if m < self.labels.len() {
                        self.labels[m]
                    } else {
                        let fresh = (0..).find(|l| !used.contains(l)).expect("unbounded range");
                        used.push(fresh);
                        fresh
                    }
                })
                .collect()
        } else {
            (0..centroids.len()).collect()
        };

        self.assignment = ids
            .iter()
            .zip(&assignment)
            .map(|(&id, &c)| (id, labels[c]))
            .collect();
        self.raw_centroids = raw_centroids;
        self.labels = labels;
        self.last_refresh_round = t;
        self.pool_size_at_refresh = ids.len();
        Ok(())
    }

    fn warm_centroids(&self, ids: &[KernelId], points: &[RuntimePoint]) -> Vec<RuntimePoint> {
        let mut sums: BTreeMap<usize, ([f64; RUNTIME_DIMS], usize)> = BTreeMap::new();
        for (id, p) in ids.iter().zip(points) {
            if let Some(&label) = self.assignment.get(id) {
                let entry = sums.entry(label).or_insert(([0.0; RUNTIME_DIMS], 0));
                for d in 0..RUNTIME_DIMS {
                    entry.0[d] += p[d];
                }
                entry.1 += 1;
            }
        }
        sums.values()
            .map(|(s, n)| std::array::from_fn(|d| s[d] / *n as f64))
            .collect()
    }
}

/// Runs Lloyd and drops clusters left without members.
fn finish(points: &[RuntimePoint], seeds: Vec<RuntimePoint>) -> (f64, Vec<usize>, Vec<RuntimePoint>) {
    let (assignment, centroids) = lloyd_iterate(points, seeds);
    let mut counts = vec![0usize; centroids.len()];
    for &c in &assignment {
        counts[c] += 1;
    }
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            remap[c] = kept.len();
            kept.push(centroids[c]);
        }
    }
    let assignment: Vec<usize> = assignment.iter().map(|&c| remap[c]).collect();
    let cost = wcss(points, &assignment, &kept);
    (cost, assignment, kept)
}
