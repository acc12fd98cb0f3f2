mod common;

use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use kerneltune::clustering::{lloyd_iterate, seed_centroids_kmeanspp};
use kerneltune::compatibility::{sigmoid, CompatibilityModel, LogisticHead, ProfilingFeatures, WarmStartPair};
use kerneltune::model::NUM_COUNTERS;
use kerneltune::StrategyId;

#[test]
fn kmeans_reaches_exhaustive_optimum_on_separated_triples() {
    let worst = kmeans_vs_exhaustive(50, 11).unwrap();
    assert!(worst <= 1e-9);
}

#[test]
fn exhaustive_oracle_sanity() {
    // Two obvious pairs plus a singleton.
    let points = [[0.0], [1.0], [10.0], [11.0], [50.0]];
    assert!((exhaustive_wcss(&points, 3) - 1.0).abs() < 1e-12);
    assert!(same_partition(&[0, 0, 1], &[2, 2, 0]));
    assert!(!same_partition(&[0, 1, 1], &[2, 2, 0]));
}

#[test]
fn lloyd_from_subsampled_seeds_is_never_worse_than_its_seeding() {
    // With the default 10% subsample, nine points give a three-point
    // subsample; Lloyd still converges to a fixed point at or below the
    // seeding cost, and hits the optimum whenever the seeds cover every
    // triple.
    let mut r = rng(3);
    let mut optimal = 0;
    for _ in 0..100 {
        let (points, groups) = separated_triples(&mut r);
        let seeds = seed_centroids_kmeanspp(&points, 3, &mut r);
        let (assignment, _) = lloyd_iterate(&points, seeds.clone());
        let covered: std::collections::BTreeSet<usize> = seeds
            .iter()
            .map(|s| groups[points.iter().position(|p| p == s).unwrap()])
            .collect();
        if covered.len() == 3 {
            assert!(same_partition(&assignment, &groups));
            optimal += 1;
        }
    }
    assert!(optimal > 0);
}

#[test]
fn gradient_matches_finite_differences() {
    let worst = gradient_vs_finite_differences(100, 5).unwrap();
    assert!(worst < 1e-5, "{worst}");
}

/// Full-batch gradient descent on the same objective; an independent
/// training route for the separable-data check.
fn batch_reference(batch: &[(ProfilingFeatures, bool)], l2: f64, steps: usize) -> ([f64; NUM_COUNTERS], f64) {
    let (mut w, mut b) = ([0.0; NUM_COUNTERS], 0.0);
    for _ in 0..steps {
        let mut gw = [0.0; NUM_COUNTERS];
        let mut gb = 0.0;
        for (phi, y) in batch {
            let z: f64 = w.iter().zip(&phi.0).map(|(a, x)| a * x).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - if *y { 1.0 } else { 0.0 };
            for (g, x) in gw.iter_mut().zip(&phi.0) {
                *g += err * x;
            }
            gb += err;
        }
        let n = batch.len() as f64;
        for d in 0..NUM_COUNTERS {
            w[d] -= 1.0 * (gw[d] / n + l2 * w[d]);
        }
        b -= 1.0 * gb / n;
    }
    (w, b)
}

#[test]
fn sgd_learns_separable_buffer() {
    let mut r = rng(21);
    // Feature 3 decides the label with margin 0.5: positives in [0.75, 1],
    // negatives in [0, 0.25]. The rest is noise.
    let batch: Vec<(ProfilingFeatures, bool)> = (0..200)
        .map(|i| {
            let y = i % 2 == 0;
            let mut phi: [f64; NUM_COUNTERS] = std::array::from_fn(|_| r.random::<f64>());
            phi[3] = if y { r.random_range(0.75..=1.0) } else { r.random_range(0.0..=0.25) };
            (ProfilingFeatures(phi), y)
        })
        .collect();
    let mut shuffled = batch.clone();
    shuffled.shuffle(&mut r);

    let mut head = LogisticHead::new(500);
    for _ in 0..50 {
        head.sgd_epoch_over(&shuffled, 0.1, 1e-4, &mut r);
    }
    let accuracy = |predict: &dyn Fn(&ProfilingFeatures) -> f64| {
        batch.iter().filter(|(phi, y)| (predict(phi) > 0.5) == *y).count() as f64 / batch.len() as f64
    };
    let sgd = accuracy(&|phi| head.predict(phi));
    let (w, b) = batch_reference(&batch, 1e-4, 2000);
    let reference = accuracy(&|phi| {
        sigmoid(w.iter().zip(&phi.0).map(|(a, x)| a * x).sum::<f64>() + b)
    });
    assert!(reference >= 0.95, "reference accuracy {reference}");
    assert!(sgd >= 0.95, "sgd accuracy {sgd}");
    // Both routes agree that feature 3 carries the signal.
    let top = |w: &[f64; NUM_COUNTERS]| (0..NUM_COUNTERS).max_by(|a, b| w[*a].abs().total_cmp(&w[*b].abs())).unwrap();
    assert_eq!(top(&head.weights), 3);
    assert_eq!(top(&w), 3);
}

#[test]
fn balanced_uncorrelated_warm_start_stays_near_half() {
    // One epoch of per-sample SGD at η = 0.1 leaves last-iterate noise, so a
    // single warm start can drift past 0.1 on some inputs. The Monte Carlo
    // expectation over independent warm starts is what stays within 0.1.
    let instances = 400;
    let (mut total_dev, mut total_psi) = (0.0, 0.0);
    for seed in 0..instances {
        let mut r = rng(seed);
        let pairs: Vec<WarmStartPair> = (0..1000)
            .map(|_| WarmStartPair {
                strategy: StrategyId(0),
                features: ProfilingFeatures(std::array::from_fn(|_| r.random::<f64>())),
                label: r.random::<bool>(),
            })
            .collect();
        let mut model = CompatibilityModel::new(1, 500, 0.1, 1e-4);
        model.warm_start(&pairs, &mut r).unwrap();
        for _ in 0..100 {
            let held_out = ProfilingFeatures(std::array::from_fn(|_| r.random::<f64>()));
            let psi = model.predict(StrategyId(0), &held_out);
            total_dev += (psi - 0.5).abs();
            total_psi += psi;
        }
    }
    let n = (instances * 100) as f64;
    let mean_dev = total_dev / n;
    let mean_psi = total_psi / n;
    assert!(mean_dev < 0.1, "mean |ψ - 0.5| = {mean_dev}");
    assert!((mean_psi - 0.5).abs() < 0.01, "mean ψ = {mean_psi}");
}

#[test]
fn select_arm_matches_brute_force() {
    select_arm_vs_brute_force(200, 99).unwrap();
}

#[test]
fn incremental_means_match_batch_means() {
    assert!(incremental_vs_batch_mean(20, 4) <= 1e-12);
}
