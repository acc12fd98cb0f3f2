//! Domain types shared by every stage of the optimization loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of hardware counters collected per kernel.
pub const NUM_COUNTERS: usize = 9;

/// Counter names, in the order used everywhere in this crate.
pub const COUNTER_NAMES: [&str; NUM_COUNTERS] = [
    "l2_hit",
    "mem_bw",
    "sm_util",
    "warp_eff",
    "achieved_occupancy",
    "reg_per_thread",
    "shared_conflicts",
    "load_store_coalesced",
    "tensor_core_util",
];

/// Index of `achieved_occupancy` inside the counter array. The same value also
/// feeds the runtime-behaviour features used for clustering.
pub const ACHIEVED_OCCUPANCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelId(pub u64);

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyId(pub usize);

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// A named semantics-preserving transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub id: StrategyId,
    pub name: String,
    /// Free text substituted into generation prompts.
    pub description: String,
}

impl Strategy {
    pub fn new(id: usize, name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            id: StrategyId(id),
            name: name.into(),
            description: description.into(),
        }
    }
}

/// Raw measurement of one compiled kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    /// Mean execution time, milliseconds.
    pub latency: f64,
    /// Bytes touched by one invocation.
    pub mem_footprint: f64,
    /// Flops per byte.
    pub arithmetic_intensity: f64,
    pub block_dim_x: u32,
    pub block_dim_y: u32,
    /// Raw counter values in [`COUNTER_NAMES`] order.
    pub counters: [f64; NUM_COUNTERS],
    pub correctness_passed: bool,
}

impl MeasurementRecord {
    pub fn achieved_occupancy(&self) -> f64 {
        self.counters[ACHIEVED_OCCUPANCY]
    }
}

/// One implementation in the candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCandidate {
    pub id: KernelId,
    pub parent_id: Option<KernelId>,
    pub applied_strategy: Option<StrategyId>,
    /// Kernel code, or an opaque token for simulated environments.
    pub source: String,
    pub measurement: Option<MeasurementRecord>,
    pub valid: bool,
    /// Milliseconds.
    pub compile_time: f64,
}

impl KernelCandidate {
    pub fn latency(&self) -> Option<f64> {
        self.measurement.as_ref().map(|m| m.latency)
    }
}

/// The set of valid kernels discovered so far, ordered by id.
///
/// Ids are assigned in increasing order, so a parent always precedes its
/// children and lookups are a binary search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    kernels: Vec<KernelCandidate>,
}

impl CandidatePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a valid, measured candidate whose id exceeds every pooled id.
    pub fn insert(&mut self, candidate: KernelCandidate) -> Result<()> {
        if !candidate.valid {
            return Err(Error::Domain(format!(
                "{} is invalid and cannot join the pool",
                candidate.id
            )));
        }
        if candidate.measurement.is_none() {
            return Err(Error::Domain(format!("{} has no measurement", candidate.id)));
        }
        if let Some(last) = self.kernels.last() {
            if candidate.id <= last.id {
                return Err(Error::Domain(format!(
                    "{} is not newer than {}",
                    candidate.id, last.id
                )));
            }
        }
        if let Some(parent) = candidate.parent_id {
            if parent >= candidate.id || self.get(parent).is_none() {
                return Err(Error::Domain(format!(
                    "{} names missing or newer parent {}",
                    candidate.id, parent
                )));
            }
        }
        self.kernels.push(candidate);
        Ok(())
    }

    pub fn get(&self, id: KernelId) -> Option<&KernelCandidate> {
        self.kernels
            .binary_search_by_key(&id, |k| k.id)
            .ok()
            .map(|i| &self.kernels[i])
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, KernelCandidate> {
        self.kernels.iter()
    }

    pub fn as_slice(&self) -> &[KernelCandidate] {
        &self.kernels
    }

    /// The pooled kernel with the shortest measured latency (lowest id on ties).
    pub fn best(&self) -> Option<&KernelCandidate> {
        self.kernels.iter().fold(None, |best, k| match (best, k.latency()) {
            (None, Some(_)) => Some(k),
            (Some(b), Some(l)) if l < b.latency().unwrap_or(f64::INFINITY) => Some(k),
            (b, _) => b,
        })
    }
}

impl<'a> IntoIterator for &'a CandidatePool {
    type Item = &'a KernelCandidate;
    type IntoIter = std::slice::Iter<'a, KernelCandidate>;

    fn into_iter(self) -> Self::IntoIter {
        self.kernels.iter()
    }
}

/// Strategy-application chain from a root kernel to `id`, root first.
pub fn candidate_lineage(
    pool: &CandidatePool,
    id: KernelId,
) -> Result<Vec<(KernelId, Option<StrategyId>)>> {
    let mut chain = Vec::new();
    let mut cursor = Some(id);
    while let Some(current) = cursor {
        let kernel = pool.get(current).ok_or(Error::UnknownKernel(current))?;
        chain.push((kernel.id, kernel.applied_strategy));
        cursor = kernel.parent_id;
    }
    chain.reverse();
    Ok(chain)
}

/// Relative latency improvement of a transformed kernel over its parent.
///
/// Invalid children score exactly `-1`. Valid children score
/// `max(clip_floor, 1 - new/prev)`.
pub fn compute_reward(
    prev_latency: f64,
    new_latency: Option<f64>,
    valid: bool,
    clip_floor: f64,
) -> Result<f64> {
    if !(prev_latency > 0.0) {
        return Err(Error::Domain(format!(
            "previous latency must be positive, got {prev_latency}"
        )));
    }
    if !valid {
        return Ok(-1.0);
    }
    let new_latency = new_latency
        .ok_or_else(|| Error::Domain("valid child is missing its latency".into()))?;
    if !(new_latency > 0.0) {
        return Err(Error::Domain(format!(
            "new latency must be positive, got {new_latency}"
        )));
    }
    Ok((1.0 - new_latency / prev_latency).max(clip_floor))
}

/// Validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub num_clusters: usize,
    pub alpha: f64,
    /// Number of rounds to run.
    pub horizon: usize,
    pub refresh_interval: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub reward_clip_floor: f64,
    pub rng_seed: u64,
    /// Synthetic pre-training pairs requested from the environment; 0 keeps
    /// the zero-initialised compatibility heads.
    pub warm_start_pairs: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            num_clusters: 3,
            alpha: 0.5,
            horizon: 10,
            refresh_interval: 10,
            buffer_capacity: 500,
            learning_rate: 0.1,
            l2_penalty: 1e-4,
            reward_clip_floor: -1.0,
            rng_seed: 0,
            warm_start_pairs: 0,
        }
    }
}

/// Unvalidated configuration fields, as read from a file or the command line.
///
/// Integers are kept signed so that negative inputs surface as named
/// violations instead of parse failures.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub num_clusters: Option<i64>,
    pub alpha: Option<f64>,
    pub horizon: Option<i64>,
    pub refresh_interval: Option<i64>,
    pub buffer_capacity: Option<i64>,
    pub learning_rate: Option<f64>,
    pub l2_penalty: Option<f64>,
    pub reward_clip_floor: Option<f64>,
    pub rng_seed: Option<u64>,
    pub warm_start_pairs: Option<i64>,
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse {value:?}")))
}

impl RawConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value", lineno + 1))
            })?;
            raw.set(key.trim(), value.trim())?;
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_clusters" => self.num_clusters = Some(parse_field(key, value)?),
            "alpha" => self.alpha = Some(parse_field(key, value)?),
            "horizon" | "iterations" => self.horizon = Some(parse_field(key, value)?),
            "refresh_interval" => self.refresh_interval = Some(parse_field(key, value)?),
            "buffer_capacity" => self.buffer_capacity = Some(parse_field(key, value)?),
            "learning_rate" => self.learning_rate = Some(parse_field(key, value)?),
            "l2_penalty" => self.l2_penalty = Some(parse_field(key, value)?),
            "reward_clip_floor" => self.reward_clip_floor = Some(parse_field(key, value)?),
            "rng_seed" | "seed" => self.rng_seed = Some(parse_field(key, value)?),
            "warm_start_pairs" => self.warm_start_pairs = Some(parse_field(key, value)?),
            other => return Err(Error::Parse(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Fills defaults and checks every constraint, reporting all violations.
    pub fn validate(&self) -> Result<Config> {
        let d = Config::default();
        let mut violations = Vec::new();

        let mut positive = |name: &str, v: Option<i64>, default: usize| match v {
            None => default,
            Some(v) if v >= 1 => v as usize,
            Some(_) => {
                violations.push(format!("{name} must be ≥ 1"));
                default
            }
        };
        let num_clusters = positive("num_clusters", self.num_clusters, d.num_clusters);
        let horizon = positive("horizon", self.horizon, d.horizon);
        let refresh_interval =
            positive("refresh_interval", self.refresh_interval, d.refresh_interval);
        let buffer_capacity = positive("buffer_capacity", self.buffer_capacity, d.buffer_capacity);

        let warm_start_pairs = match self.warm_start_pairs {
            None => d.warm_start_pairs,
            Some(v) if v >= 0 => v as usize,
            Some(_) => {
                violations.push("warm_start_pairs must be ≥ 0".into());
                d.warm_start_pairs
            }
        };

        let alpha = self.alpha.unwrap_or(d.alpha);
        if !(alpha >= 0.0 && alpha.is_finite()) {
            violations.push("alpha must be ≥ 0".into());
        }
        let learning_rate = self.learning_rate.unwrap_or(d.learning_rate);
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            violations.push("learning_rate must be > 0".into());
        }
        let l2_penalty = self.l2_penalty.unwrap_or(d.l2_penalty);
        if !(l2_penalty >= 0.0 && l2_penalty.is_finite()) {
            violations.push("l2_penalty must be ≥ 0".into());
        }
        let reward_clip_floor = self.reward_clip_floor.unwrap_or(d.reward_clip_floor);
        if !(reward_clip_floor <= -1.0) {
            violations.push("reward_clip_floor must be ≤ -1".into());
        }

        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        Ok(Config {
            num_clusters,
            alpha,
            horizon,
            refresh_interval,
            buffer_capacity,
            learning_rate,
            l2_penalty,
            reward_clip_floor,
            rng_seed: self.rng_seed.unwrap_or(d.rng_seed),
            warm_start_pairs,
        })
    }
}

/// Parses and validates a flat `key = value` configuration file body.
pub fn validate_config(text: &str) -> Result<Config> {
    RawConfig::parse_kv(text)?.validate()
}

/// One round of the optimization loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullRecord {
    pub round: usize,
    pub kernel_id: KernelId,
    pub strategy_id: StrategyId,
    /// Cluster label of the parent at selection time.
    pub cluster: usize,
    /// `+inf` for forced exploration of an unpulled pair.
    #[serde(with = "crate::model::float_repr")]
    pub ucb_score: f64,
    pub reward: f64,
    pub child_id: Option<KernelId>,
    pub child_valid: bool,
    pub child_latency: Option<f64>,
}

/// JSON has no infinities; keep them as strings so records round-trip.
pub(crate) mod float_repr {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measured(latency: f64) -> MeasurementRecord {
        MeasurementRecord {
            latency,
            mem_footprint: 1.0,
            arithmetic_intensity: 0.0,
            block_dim_x: 1,
            block_dim_y: 1,
            counters: [0.0; NUM_COUNTERS],
            correctness_passed: true,
        }
    }

    fn kernel(id: u64, parent: Option<u64>, strategy: Option<usize>) -> KernelCandidate {
        KernelCandidate {
            id: KernelId(id),
            parent_id: parent.map(KernelId),
            applied_strategy: strategy.map(StrategyId),
            source: String::new(),
            measurement: Some(measured(1.0 + id as f64)),
            valid: true,
            compile_time: 1.0,
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(compute_reward(10.0, Some(5.0), true, -1.0).unwrap(), 0.5);
        assert_eq!(compute_reward(10.0, None, false, -1.0).unwrap(), -1.0);
        assert_eq!(compute_reward(5.0, Some(20.0), true, -1.0).unwrap(), -1.0);
        assert_eq!(compute_reward(7.0, Some(7.0), true, -1.0).unwrap(), 0.0);
        // Raw value without the clip.
        assert_eq!(
            compute_reward(5.0, Some(20.0), true, f64::NEG_INFINITY).unwrap(),
            -3.0
        );
    }

    #[test]
    fn reward_domain_errors() {
        assert!(compute_reward(0.0, Some(1.0), true, -1.0).is_err());
        assert!(compute_reward(-1.0, None, false, -1.0).is_err());
        assert!(compute_reward(1.0, Some(0.0), true, -1.0).is_err());
        assert!(compute_reward(1.0, None, true, -1.0).is_err());
    }

    #[test]
    fn config_defaults() {
        let cfg = validate_config("").unwrap();
        assert_eq!(cfg.num_clusters, 3);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.refresh_interval, 10);
        assert_eq!(cfg.buffer_capacity, 500);
        assert_eq!(cfg.learning_rate, 0.1);
        assert_eq!(cfg.l2_penalty, 1e-4);
        assert_eq!(cfg.reward_clip_floor, -1.0);
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn config_violations_are_named() {
        match validate_config("num_clusters = 0") {
            Err(Error::Config(v)) => assert_eq!(v, vec!["num_clusters must be ≥ 1"]),
            other => panic!("unexpected {other:?}"),
        }
        match validate_config("alpha=-1\nlearning_rate=-0.1\nbuffer_capacity=-5\nrefresh_interval=-1")
        {
            Err(Error::Config(v)) => {
                assert_eq!(v.len(), 4);
                for name in ["alpha", "learning_rate", "buffer_capacity", "refresh_interval"] {
                    assert!(v.iter().any(|m| m.starts_with(name)), "{name} missing in {v:?}");
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_accepts_zero_alpha_and_comments() {
        let cfg = validate_config("# bias off\nalpha = 0  # trailing\nhorizon=42\n").unwrap();
        assert_eq!(cfg.alpha, 0.0);
        assert_eq!(cfg.horizon, 42);
        assert!(validate_config("bogus = 1").is_err());
        assert!(validate_config("alpha").is_err());
    }

    #[test]
    fn lineage_follows_parents() {
        let mut pool = CandidatePool::new();
        pool.insert(kernel(0, None, None)).unwrap();
        assert_eq!(
            candidate_lineage(&pool, KernelId(0)).unwrap(),
            vec![(KernelId(0), None)]
        );
        pool.insert(kernel(1, Some(0), Some(2))).unwrap();
        pool.insert(kernel(3, Some(1), Some(0))).unwrap();
        assert_eq!(
            candidate_lineage(&pool, KernelId(3)).unwrap(),
            vec![
                (KernelId(0), None),
                (KernelId(1), Some(StrategyId(2))),
                (KernelId(3), Some(StrategyId(0)))
            ]
        );
        assert!(matches!(
            candidate_lineage(&pool, KernelId(99)),
            Err(Error::UnknownKernel(KernelId(99)))
        ));
    }

    #[test]
    fn pool_rejects_bad_inserts() {
        let mut pool = CandidatePool::new();
        pool.insert(kernel(0, None, None)).unwrap();
        let mut invalid = kernel(1, Some(0), Some(0));
        invalid.valid = false;
        assert!(pool.insert(invalid).is_err());
        assert!(pool.insert(kernel(0, None, None)).is_err());
        assert!(pool.insert(kernel(2, Some(1), Some(0))).is_err());
        pool.insert(kernel(2, Some(0), Some(0))).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.best().unwrap().id, KernelId(0));
    }

    #[test]
    fn pull_record_json_keeps_infinity() {
        let rec = PullRecord {
            round: 1,
            kernel_id: KernelId(0),
            strategy_id: StrategyId(1),
            cluster: 0,
            ucb_score: f64::INFINITY,
            reward: -1.0,
            child_id: None,
            child_valid: false,
            child_latency: None,
        };
        let text = serde_json::to_string(&rec).unwrap();
        let back: PullRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
    }

    proptest::proptest! {
        #[test]
        fn reward_bounded_and_monotone(prev in 1e-3f64..1e3, a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
            let ra = compute_reward(prev, Some(a), true, f64::NEG_INFINITY).unwrap();
            let rb = compute_reward(prev, Some(b), true, f64::NEG_INFINITY).unwrap();
            proptest::prop_assert!(ra <= 1.0);
            if a < b {
                proptest::prop_assert!(ra > rb);
            }
            let clipped = compute_reward(prev, Some(a), true, -1.0).unwrap();
            proptest::prop_assert!((-1.0..=1.0).contains(&clipped));
        }
    }
}
