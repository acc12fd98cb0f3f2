//! Speedup aggregation and regret accounting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::PullRecord;

/// Speedup strictly above this counts toward Fast@1.
pub const FAST_THRESHOLD: f64 = 1.1;

fn check_positive(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| *x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be positive and finite")))
    }
}

/// Runtime-weighted average of `base_i / new_i`, weighted by `base_i`.
pub fn weighted_speedup(base_times: &[f64], new_times: &[f64]) -> Result<f64> {
    if base_times.len() != new_times.len() {
        return Err(Error::LengthMismatch { left: base_times.len(), right: new_times.len() });
    }
    if base_times.is_empty() {
        return Err(Error::Empty("speedup inputs"));
    }
    check_positive(base_times, "base times")?;
    check_positive(new_times, "new times")?;
    let total: f64 = base_times.iter().sum();
    Ok(base_times
        .iter()
        .zip(new_times)
        .map(|(b, n)| (b / total) * (b / n))
        .sum())
}

/// Fraction of speedups strictly above [`FAST_THRESHOLD`].
pub fn fast_at_1(speedups: &[f64]) -> Result<f64> {
    if speedups.is_empty() {
        return Err(Error::Empty("speedups"));
    }
    let fast = speedups.iter().filter(|s| **s > FAST_THRESHOLD).count();
    Ok(fast as f64 / speedups.len() as f64)
}

pub fn best_speedup(speedups: &[f64]) -> Result<f64> {
    speedups
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::Empty("speedups"))
}

pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    check_positive(values, "values")?;
    let log_mean = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
    Ok(log_mean.exp())
}

/// `3|S| sqrt(8 T ln T) + T ε_cluster + T α ε_profile`, for `T ≥ 2`.
pub fn regret_bound(
    horizon: usize,
    num_strategies: usize,
    epsilon_cluster: f64,
    epsilon_profile: f64,
    alpha: f64,
) -> Result<f64> {
    if horizon < 2 {
        return Err(Error::Domain(format!("regret bound needs T ≥ 2, got {horizon}")));
    }
    let t = horizon as f64;
    Ok(3.0 * num_strategies as f64 * (8.0 * t * t.ln()).sqrt()
        + t * epsilon_cluster
        + t * alpha * epsilon_profile)
}

/// Per-round empirical regret against a known optimum. Index `i` is round
/// `i + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretSeries {
    pub optimal_value: f64,
    pub rewards: Vec<f64>,
    pub instantaneous: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// `cumulative[i] / (i + 1)`.
    pub average_regret: Vec<f64>,
    /// Running mean of observed rewards.
    pub average_reward: Vec<f64>,
    /// Cumulative regret over rounds whose pull was not forced exploration.
    pub cumulative_after_warmup: Vec<f64>,
}

impl RegretSeries {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn final_cumulative(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Tab-separated `t, reward, cumulative_regret, bound_value,
    /// average_reward`; `bound` maps a round to its bound (NaN when
    /// undefined).
    pub fn to_tsv(&self, bound: impl Fn(usize) -> Option<f64>) -> String {
        let mut out = String::from("t\treward\tcumulative_regret\tbound_value\taverage_reward\n");
        for i in 0..self.len() {
            let t = i + 1;
            let b = bound(t).unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{t}\t{}\t{}\t{b}\t{}",
                self.rewards[i], self.cumulative[i], self.average_reward[i]
            );
        }
        out
    }
}

/// Builds the regret series of a trajectory; observed rewards stand in for
/// their expectations.
pub fn cumulative_regret(records: &[PullRecord], optimal_value: f64) -> RegretSeries {
    let mut series = RegretSeries { optimal_value, ..Default::default() };
    let (mut cum, mut cum_reward, mut cum_after) = (0.0, 0.0, 0.0);
    for (i, rec) in records.iter().enumerate() {
        let regret = optimal_value - rec.reward;
        cum += regret;
        cum_reward += rec.reward;
        if rec.ucb_score.is_finite() {
            cum_after += regret;
        }
        let t = (i + 1) as f64;
        series.rewards.push(rec.reward);
        series.instantaneous.push(regret);
        series.cumulative.push(cum);
        series.average_regret.push(cum / t);
        series.average_reward.push(cum_reward / t);
        series.cumulative_after_warmup.push(cum_after);
    }
    series
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KernelId, StrategyId};
    use proptest::prelude::*;

    fn pull(reward: f64, score: f64) -> PullRecord {
        PullRecord {
            round: 1,
            kernel_id: KernelId(0),
            strategy_id: StrategyId(0),
            cluster: 0,
            ucb_score: score,
            reward,
            child_id: None,
            child_valid: false,
            child_latency: None,
        }
    }

    #[test]
    fn weighted_speedup_examples() {
        assert_eq!(weighted_speedup(&[2.0, 2.0], &[1.0, 4.0]).unwrap(), 1.25);
        assert_eq!(weighted_speedup(&[3.0, 7.0], &[3.0, 7.0]).unwrap(), 1.0);
        assert!((weighted_speedup(&[9.0, 1.0], &[3.0, 1.0]).unwrap() - 2.8).abs() < 1e-12);
        assert!(weighted_speedup(&[1.0], &[1.0, 2.0]).is_err());
        assert!(weighted_speedup(&[], &[]).is_err());
        assert!(weighted_speedup(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn fast_and_best_examples() {
        assert!((fast_at_1(&[1.2, 1.0, 0.9]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(fast_at_1(&[1.10]).unwrap(), 0.0);
        assert_eq!(fast_at_1(&[1.11]).unwrap(), 1.0);
        assert!(fast_at_1(&[]).is_err());
        assert_eq!(best_speedup(&[1.0, 2.0, 3.0]).unwrap(), 3.0);
        assert_eq!(best_speedup(&[0.5]).unwrap(), 0.5);
        assert_eq!(best_speedup(&[2.0, 2.0]).unwrap(), 2.0);
        assert!(best_speedup(&[]).is_err());
        assert!((geometric_mean(&[1.0, 4.0]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn regret_bound_examples() {
        assert!((regret_bound(100, 5, 0.0, 0.0, 0.0).unwrap() - 910.45).abs() < 0.01);
        let base = regret_bound(100, 5, 0.0, 0.0, 0.5).unwrap();
        let full = regret_bound(100, 5, 0.1, 0.2, 0.5).unwrap();
        assert!((full - base - 20.0).abs() < 1e-9);
        let minimal = regret_bound(2, 5, 0.0, 0.0, 0.0).unwrap();
        assert!((minimal - 15.0 * (16.0 * 2f64.ln()).sqrt()).abs() < 1e-9);
        assert!(regret_bound(1, 5, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn cumulative_regret_examples() {
        let s = cumulative_regret(&[pull(-1.0, f64::INFINITY)], 0.5);
        assert_eq!(s.cumulative, vec![1.5]);
        assert_eq!(s.cumulative_after_warmup, vec![0.0]);
        let optimal: Vec<_> = (0..10).map(|_| pull(0.5, 1.0)).collect();
        let s = cumulative_regret(&optimal, 0.5);
        assert!(s.cumulative.iter().all(|c| *c == 0.0));
        assert!(s.average_reward.iter().all(|r| *r == 0.5));
        assert!(cumulative_regret(&[], 0.5).is_empty());
    }

    #[test]
    fn tsv_export() {
        let s = cumulative_regret(&[pull(0.5, 1.0), pull(0.0, 1.0)], 0.5);
        let tsv = s.to_tsv(|t| regret_bound(t, 1, 0.0, 0.0, 0.0).ok());
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "t\treward\tcumulative_regret\tbound_value\taverage_reward");
        assert_eq!(lines[1], "1\t0.5\t0\tNaN\t0.5");
        assert!(lines[2].starts_with("2\t0\t0.5\t"));
        assert_eq!(lines.len(), 3);
    }

    fn positive_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..100.0, 1..20)
    }

    proptest! {
        #[test]
        fn equal_bases_give_plain_mean(base in 0.01f64..100.0, new in positive_vec()) {
            let bases = vec![base; new.len()];
            let plain = new.iter().map(|n| base / n).sum::<f64>() / new.len() as f64;
            let w = weighted_speedup(&bases, &new).unwrap();
            prop_assert!((w - plain).abs() <= 1e-12 * plain.max(1.0));
        }

        #[test]
        fn weights_sum_to_one(base in positive_vec()) {
            // With new == base every speedup is 1, so the result is Σ w_i.
            let w = weighted_speedup(&base, &base).unwrap();
            prop_assert!((w - 1.0).abs() < 1e-12);
        }

        #[test]
        fn bound_is_monotone(
            t in 2usize..5000, s in 1usize..20,
            ec in 0.0f64..1.0, ep in 0.0f64..1.0, a in 0.0f64..2.0,
        ) {
            let b = regret_bound(t, s, ec, ep, a).unwrap();
            prop_assert!(regret_bound(t + 1, s, ec, ep, a).unwrap() > b);
            prop_assert!(regret_bound(t, s + 1, ec, ep, a).unwrap() > b);
            prop_assert!(regret_bound(t, s, ec + 0.1, ep, a).unwrap() > b);
            prop_assert!(regret_bound(t, s, ec, ep + 0.1, a + 0.1).unwrap() > b);
            prop_assert!(regret_bound(t, s, ec, ep + 0.1, a).unwrap() >= b);
            prop_assert!(regret_bound(t, s, ec, ep, a + 0.1).unwrap() >= b);
        }

        #[test]
        fn cumulative_nondecreasing_when_rewards_below_optimum(
            rewards in prop::collection::vec(-1.0f64..=0.5, 0..50),
        ) {
            let records: Vec<_> = rewards.iter().map(|r| pull(*r, 1.0)).collect();
            let s = cumulative_regret(&records, 0.5);
            prop_assert!(s.cumulative.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
