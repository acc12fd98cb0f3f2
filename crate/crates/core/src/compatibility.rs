//! Per-strategy logistic compatibility heads over normalised profiling counters.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StrategyId, NUM_COUNTERS};

/// Counters min-max scaled to [0, 1] over the current pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilingFeatures(pub [f64; NUM_COUNTERS]);

/// Per-counter minimum and maximum over a set of kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterRange {
    pub min: [f64; NUM_COUNTERS],
    pub max: [f64; NUM_COUNTERS],
}

impl CounterRange {
    pub fn fit<'a>(counters: impl IntoIterator<Item = &'a [f64; NUM_COUNTERS]>) -> Result<Self> {
        let mut iter = counters.into_iter();
        let first = iter.next().ok_or(Error::Empty("counter set"))?;
        let mut range = Self { min: *first, max: *first };
        for c in iter {
            for i in 0..NUM_COUNTERS {
                range.min[i] = range.min[i].min(c[i]);
                range.max[i] = range.max[i].max(c[i]);
            }
        }
        Ok(range)
    }
}

/// Min-max scaling of one kernel's counters. Degenerate counters
/// (`min == max`) map to 0.5.
pub fn profiling_feature_vector(
    raw: &[f64; NUM_COUNTERS],
    range: &CounterRange,
) -> Result<ProfilingFeatures> {
    let mut out = [0.0; NUM_COUNTERS];
    for i in 0..NUM_COUNTERS {
        let (lo, hi) = (range.min[i], range.max[i]);
        if lo > hi {
            return Err(Error::Domain(format!("counter {i}: min {lo} exceeds max {hi}")));
        }
        out[i] = if lo == hi {
            0.5
        } else {
            ((raw[i] - lo) / (hi - lo)).clamp(0.0, 1.0)
        };
    }
    Ok(ProfilingFeatures(out))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn affine(w: &[f64; NUM_COUNTERS], b: f64, phi: &ProfilingFeatures) -> f64 {
    w.iter().zip(&phi.0).map(|(w, x)| w * x).sum::<f64>() + b
}

/// Gradient of the mean log-loss over `batch` plus `λ/2 ‖w‖²`.
/// The bias is not regularised.
pub fn logistic_loss_gradient(
    w: &[f64; NUM_COUNTERS],
    b: f64,
    batch: &[(ProfilingFeatures, bool)],
    l2_penalty: f64,
) -> Result<([f64; NUM_COUNTERS], f64)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    let n = batch.len() as f64;
    let mut grad_w = [0.0; NUM_COUNTERS];
    let mut grad_b = 0.0;
    for (phi, y) in batch {
        let err = sigmoid(affine(w, b, phi)) - f64::from(u8::from(*y));
        for i in 0..NUM_COUNTERS {
            grad_w[i] += err * phi.0[i];
        }
        grad_b += err;
    }
    for i in 0..NUM_COUNTERS {
        grad_w[i] = grad_w[i] / n + l2_penalty * w[i];
    }
    Ok((grad_w, grad_b / n))
}

/// Logistic head for one strategy plus its bounded outcome buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub weights: [f64; NUM_COUNTERS],
    pub bias: f64,
    buffer: VecDeque<(ProfilingFeatures, bool)>,
    capacity: usize,
    /// Inserts since the last triggered epoch.
    pending: usize,
}

impl LogisticHead {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            weights: [0.0; NUM_COUNTERS],
            bias: 0.0,
            buffer: VecDeque::with_capacity(capacity),
            capacity,
            pending: 0,
        }
    }

    pub fn predict(&self, phi: &ProfilingFeatures) -> f64 {
        sigmoid(affine(&self.weights, self.bias, phi))
    }

    pub fn buffer(&self) -> &VecDeque<(ProfilingFeatures, bool)> {
        &self.buffer
    }

    /// Appends `(φ, reward > 0)`, evicting the oldest entry beyond capacity.
    ///
    /// Every `capacity` inserts (i.e. whenever the buffer has been filled with
    /// fresh outcomes) one SGD epoch runs over the buffer, which is kept.
    /// Returns whether an epoch ran.
    pub fn record_outcome<R: Rng + ?Sized>(
        &mut self,
        phi: ProfilingFeatures,
        reward: f64,
        learning_rate: f64,
        l2_penalty: f64,
        rng: &mut R,
    ) -> bool {
        self.buffer.push_back((phi, reward > 0.0));
        if self.buffer.len() > self.capacity {
            self.buffer.pop_front();
        }
        self.pending += 1;
        if self.pending >= self.capacity {
            self.pending = 0;
            let batch: Vec<_> = self.buffer.iter().copied().collect();
            self.sgd_epoch_over(&batch, learning_rate, l2_penalty, rng);
            true
        } else {
            false
        }
    }

    /// One shuffled pass of per-sample SGD over the buffer.
    pub fn sgd_epoch<R: Rng + ?Sized>(&mut self, learning_rate: f64, l2_penalty: f64, rng: &mut R) {
        let batch: Vec<_> = self.buffer.iter().copied().collect();
        self.sgd_epoch_over(&batch, learning_rate, l2_penalty, rng);
    }

    /// One shuffled pass of per-sample SGD over an external batch.
    pub fn sgd_epoch_over<R: Rng + ?Sized>(
        &mut self,
        batch: &[(ProfilingFeatures, bool)],
        learning_rate: f64,
        l2_penalty: f64,
        rng: &mut R,
    ) {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(rng);
        for i in order {
            let (phi, y) = batch[i];
            let err = self.predict(&phi) - f64::from(u8::from(y));
            for d in 0..NUM_COUNTERS {
                self.weights[d] -= learning_rate * (err * phi.0[d] + l2_penalty * self.weights[d]);
            }
            self.bias -= learning_rate * err;
        }
    }
}

/// One supervised pre-training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmStartPair {
    pub strategy: StrategyId,
    pub features: ProfilingFeatures,
    pub label: bool,
}

/// The full set of per-strategy heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityModel {
    heads: Vec<LogisticHead>,
    learning_rate: f64,
    l2_penalty: f64,
}

impl CompatibilityModel {
    /// Zero-initialised heads: every prediction is exactly 0.5.
    pub fn new(num_strategies: usize, capacity: usize, learning_rate: f64, l2_penalty: f64) -> Self {
        Self {
            heads: (0..num_strategies).map(|_| LogisticHead::new(capacity)).collect(),
            learning_rate,
            l2_penalty,
        }
    }

    pub fn num_strategies(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, s: StrategyId) -> &LogisticHead {
        &self.heads[s.0]
    }

    pub fn head_mut(&mut self, s: StrategyId) -> &mut LogisticHead {
        &mut self.heads[s.0]
    }

    pub fn predict(&self, s: StrategyId, phi: &ProfilingFeatures) -> f64 {
        self.heads[s.0].predict(phi)
    }

    pub fn record_outcome<R: Rng + ?Sized>(
        &mut self,
        s: StrategyId,
        phi: ProfilingFeatures,
        reward: f64,
        rng: &mut R,
    ) -> bool {
        let (lr, l2) = (self.learning_rate, self.l2_penalty);
        self.heads[s.0].record_outcome(phi, reward, lr, l2, rng)
    }

    /// Runs one SGD epoch per strategy over that strategy's pairs. Strategies
    /// without pairs keep their current parameters.
    pub fn warm_start<R: Rng + ?Sized>(&mut self, pairs: &[WarmStartPair], rng: &mut R) -> Result<()> {
        if let Some(bad) = pairs.iter().find(|p| p.strategy.0 >= self.heads.len()) {
            return Err(Error::Domain(format!("warm-start pair names unknown {}", bad.strategy)));
        }
        let (lr, l2) = (self.learning_rate, self.l2_penalty);
        for (s, head) in self.heads.iter_mut().enumerate() {
            let batch: Vec<_> = pairs
                .iter()
                .filter(|p| p.strategy.0 == s)
                .map(|p| (p.features, p.label))
                .collect();
            if !batch.is_empty() {
                head.sgd_epoch_over(&batch, lr, l2, rng);
            }
        }
        Ok(())
    }

    /// Tab-separated `strategy w0 .. w8 bias`, one line per strategy.
    pub fn export_table(&self) -> String {
        let mut out = String::from("strategy");
        for i in 0..NUM_COUNTERS {
            let _ = write!(out, "\tw{i}");
        }
        out.push_str("\tbias\n");
        for (s, head) in self.heads.iter().enumerate() {
            let _ = write!(out, "{s}");
            for w in head.weights {
                let _ = write!(out, "\t{w}");
            }
            let _ = writeln!(out, "\t{}", head.bias);
        }
        out
    }

    /// Loads parameters written by [`Self::export_table`]. Buffers are left
    /// untouched.
    pub fn import_table(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != NUM_COUNTERS + 2 {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    NUM_COUNTERS + 2,
                    fields.len()
                )));
            }
            let num = |f: &str| -> Result<f64> {
                f.parse().map_err(|_| Error::Parse(format!("line {}: bad number {f:?}", lineno + 1)))
            };
            let s: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad strategy id", lineno + 1)))?;
            let head = self
                .heads
                .get_mut(s)
                .ok_or_else(|| Error::Parse(format!("line {}: unknown strategy {s}", lineno + 1)))?;
            for i in 0..NUM_COUNTERS {
                head.weights[i] = num(fields[i + 1])?;
            }
            head.bias = num(fields[NUM_COUNTERS + 1])?;
        }
        Ok(())
    }
}
