//! Transform and evaluate interfaces, plus the synthetic and text-generation
//! backed implementations.

mod llm;
mod sim;

pub use llm::{
    correctness_check, llm_prompt_render, llm_response_extract, KernelEvaluator, LlmEnvironment,
    ProfilerUnavailable, TextGenerationAdapter, DEFAULT_ATOL, DEFAULT_RTOL,
};
pub use sim::{
    sim_archetype_separation_check, sim_build, ArchetypeSpec, CompileTimeRange, FeatureGen,
    Simulator, SimulatorSpec, StrategySpec,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{KernelCandidate, MeasurementRecord, Strategy, StrategyId, NUM_COUNTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    Generation,
    Compile,
}

/// Result of asking the environment to rewrite a kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformOutcome {
    Generated { source: String },
    Failed(FailureReason),
}

/// A compiled and measured candidate. Validity is
/// `measurement.correctness_passed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub measurement: MeasurementRecord,
    /// Milliseconds.
    pub compile_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedKernel {
    pub source: String,
    pub evaluation: Evaluation,
}

/// One random-search observation for compatibility pre-training, with raw
/// (unnormalised) counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawWarmStartPair {
    pub strategy: StrategyId,
    pub counters: [f64; NUM_COUNTERS],
    pub label: bool,
}

/// Everything the optimization loop needs from the outside world.
///
/// Implementations own their randomness; the loop only supplies inputs.
pub trait Environment {
    fn strategies(&self) -> &[Strategy];

    /// Initial kernels, already measured. The first is the designated k0.
    fn seed_kernels(&mut self) -> Result<Vec<SeedKernel>>;

    fn transform(&mut self, parent: &KernelCandidate, strategy: &Strategy) -> TransformOutcome;

    /// Compiles, checks and times a generated source. Only called on
    /// [`TransformOutcome::Generated`] sources.
    fn evaluate(&mut self, source: &str) -> Result<Evaluation>;

    /// Synthetic pre-training data; environments without a cheap
    /// random-search phase return nothing.
    fn warm_start_pairs(&mut self, _count: usize) -> Vec<RawWarmStartPair> {
        Vec::new()
    }

    /// Expected reward of the best arm, when ground truth is known.
    fn optimal_value(&self) -> Option<f64> {
        None
    }

    /// True probability that applying `strategy` to the kernel yields a
    /// positive reward, when ground truth is known.
    fn success_probability(&self, _source: &str, _strategy: StrategyId) -> Option<f64> {
        None
    }
}
