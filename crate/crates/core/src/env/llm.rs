//! Text-generation backed environment. Transport and measurement are
//! supplied by the caller.

use super::{Environment, Evaluation, FailureReason, SeedKernel, TransformOutcome};
use crate::error::{Error, Result};
use crate::model::{KernelCandidate, Strategy};

pub const DEFAULT_ATOL: f64 = 1e-3;
pub const DEFAULT_RTOL: f64 = 1e-1;

const SOURCE_PLACEHOLDER: &str = "{source}";
const STRATEGY_PLACEHOLDER: &str = "{strategy}";

/// Substitutes `{source}` and `{strategy}` (the strategy description) into
/// `template`. Substituted text is not rescanned.
pub fn llm_prompt_render(source: &str, strategy: &Strategy, template: &str) -> Result<String> {
    if !template.contains(SOURCE_PLACEHOLDER) {
        return Err(Error::MissingPlaceholder(SOURCE_PLACEHOLDER));
    }
    if !template.contains(STRATEGY_PLACEHOLDER) {
        return Err(Error::MissingPlaceholder(STRATEGY_PLACEHOLDER));
    }
    let mut out = String::with_capacity(template.len() + source.len() + strategy.description.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        if let Some(after) = tail.strip_prefix(SOURCE_PLACEHOLDER) {
            out.push_str(source);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(STRATEGY_PLACEHOLDER) {
            out.push_str(&strategy.description);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Body of the first fenced code block, else the whole trimmed text.
/// `None` means the response holds no usable source.
pub fn llm_response_extract(response: &str) -> Option<String> {
    if let Some(start) = response.find("```") {
        let after = &response[start + 3..];
        // Skip the info string (e.g. a language tag) up to the line break.
        if let Some(nl) = after.find('\n') {
            let body = &after[nl + 1..];
            if let Some(end) = body.find("```") {
                let block = body[..end].strip_suffix('\n').unwrap_or(&body[..end]);
                let block = block.strip_suffix('\r').unwrap_or(block);
                return Some(block.to_string());
            }
        }
    }
    let trimmed = response.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

/// Elementwise `|gen - ref| <= atol + rtol * |ref|`.
pub fn correctness_check(generated: &[f64], reference: &[f64], atol: f64, rtol: f64) -> Result<bool> {
    if generated.len() != reference.len() {
        return Err(Error::LengthMismatch { left: generated.len(), right: reference.len() });
    }
    Ok(generated
        .iter()
        .zip(reference)
        .all(|(g, r)| (g - r).abs() <= atol + rtol * r.abs()))
}

type Sender = Box<dyn FnMut(&str) -> std::result::Result<String, String> + Send>;

/// Wraps a request-sender function: prompt in, response text out.
pub struct TextGenerationAdapter {
    template: String,
    sender: Sender,
}

impl TextGenerationAdapter {
    pub fn new<F>(template: impl Into<String>, sender: F) -> Result<Self>
    where
        F: FnMut(&str) -> std::result::Result<String, String> + Send + 'static,
    {
        let template = template.into();
        // Reject bad templates up front rather than on every round.
        llm_prompt_render("", &Strategy::new(0, "", ""), &template)?;
        Ok(Self { template, sender: Box::new(sender) })
    }

    /// Renders, sends and extracts. Transport errors and empty responses are
    /// generation failures.
    pub fn generate(&mut self, source: &str, strategy: &Strategy) -> TransformOutcome {
        let Ok(prompt) = llm_prompt_render(source, strategy, &self.template) else {
            return TransformOutcome::Failed(FailureReason::Generation);
        };
        match (self.sender)(&prompt) {
            Ok(response) => match llm_response_extract(&response) {
                Some(source) => TransformOutcome::Generated { source },
                None => TransformOutcome::Failed(FailureReason::Generation),
            },
            Err(e) => {
                log::debug!("generation request failed: {e}");
                TransformOutcome::Failed(FailureReason::Generation)
            }
        }
    }
}

/// Compiles, validates and profiles kernel sources.
pub trait KernelEvaluator {
    fn evaluate(&mut self, source: &str) -> Result<Evaluation>;
}

/// Placeholder evaluator for hosts without a GPU profiler.
#[derive(Debug, Default, Clone, Copy)]
pub struct ProfilerUnavailable;

impl KernelEvaluator for ProfilerUnavailable {
    fn evaluate(&mut self, _source: &str) -> Result<Evaluation> {
        Err(Error::Environment("no profiler is available on this host".into()))
    }
}

/// [`Environment`] backed by a text-generation service and an evaluator.
pub struct LlmEnvironment<E> {
    strategies: Vec<Strategy>,
    seeds: Vec<String>,
    adapter: TextGenerationAdapter,
    evaluator: E,
}

impl<E: KernelEvaluator> LlmEnvironment<E> {
    pub fn new(
        strategies: Vec<Strategy>,
        seeds: Vec<String>,
        adapter: TextGenerationAdapter,
        evaluator: E,
    ) -> Self {
        Self { strategies, seeds, adapter, evaluator }
    }
}

impl<E: KernelEvaluator> Environment for LlmEnvironment<E> {
    fn strategies(&self) -> &[Strategy] {
        &self.strategies
    }

    fn seed_kernels(&mut self) -> Result<Vec<SeedKernel>> {
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed kernels"));
        }
        self.seeds
            .iter()
            .map(|source| {
                let evaluation = self.evaluator.evaluate(source)?;
                Ok(SeedKernel { source: source.clone(), evaluation })
            })
            .collect()
    }

    fn transform(&mut self, parent: &KernelCandidate, strategy: &Strategy) -> TransformOutcome {
        self.adapter.generate(&parent.source, strategy)
    }

    fn evaluate(&mut self, source: &str) -> Result<Evaluation> {
        self.evaluator.evaluate(source)
    }
}
