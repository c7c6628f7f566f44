//! Uniform interfaces to language models: per-token logits for contrastive
//! decoding, free-text generation for logit-less models, and similarity
//! scoring. [`fixture::FixtureLm`] is a deterministic table-backed model for
//! exact tests; [`remote`] holds the OpenAI-compatible HTTP clients.

mod fixture;
pub mod remote;

pub use fixture::{FixtureLm, FixtureTableBuilder};

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{InstructionPrompt, PromptKind};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend {0:?} does not support this operation")]
    UnsupportedBackend(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("logprobs unavailable: {0}")]
    LogprobsUnavailable(String),
    #[error("empty generation after retries")]
    EmptyGeneration,
    #[error("no number found in {0:?}")]
    NoNumberFound(String),
    #[error("score {0} outside [0, 5]")]
    OutOfRange(f64),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("fixture table: {0}")]
    Fixture(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

/// Per-vocabulary-token scores from one LM step.
///
/// Remote backends reconstruct a dense vector from a top-k response; the
/// `fill` value stands in for every token id the response did not cover, so
/// vectors from a growing token registry can be aligned later.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsVector {
    values: Vec<f64>,
    fill: Option<f64>,
}

impl LogitsVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        Self::build(values, None)
    }

    pub fn with_fill(values: Vec<f64>, fill: f64) -> Result<Self, BackendError> {
        Self::build(values, Some(fill))
    }

    fn build(values: Vec<f64>, fill: Option<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::InvalidRequest("empty logits vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) || fill.is_some_and(|f| !f.is_finite()) {
            return Err(BackendError::InvalidRequest("logits must be finite".into()));
        }
        Ok(Self { values, fill })
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn fill(&self) -> Option<f64> {
        self.fill
    }

    /// Index of the largest value; ties break to the lowest token id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Extend to `len` entries using the fill value.
    pub(crate) fn extend_to(&mut self, len: usize) -> Result<(), BackendError> {
        if len <= self.values.len() {
            return Ok(());
        }
        let fill = self.fill.ok_or_else(|| {
            BackendError::InvalidRequest("cannot extend a dense logits vector".into())
        })?;
        self.values.resize(len, fill);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    RemoteLogits,
    RemoteText,
    Fixture,
}

fn default_top_k() -> usize {
    20
}
fn default_timeout_secs() -> u64 {
    30
}
fn default_max_retries() -> u32 {
    2
}
fn default_retry_base_ms() -> u64 {
    1000
}
fn default_max_text_tokens() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Logprobs requested per step (remote-logits only).
    #[serde(default = "default_top_k")]
    pub top_k_logprobs: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    /// Token cap for free-text generation through the logits interface.
    #[serde(default = "default_max_text_tokens")]
    pub max_text_tokens: usize,
    /// Table file for the fixture kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<PathBuf>,
}

impl BackendConfig {
    pub fn fixture(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Fixture,
            endpoint: None,
            model: None,
            top_k_logprobs: default_top_k(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_base_ms: default_retry_base_ms(),
            max_text_tokens: default_max_text_tokens(),
            fixture_path: Some(path.into()),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::RemoteLogits | BackendKind::RemoteText => {
                if self.endpoint.is_none() || self.model.is_none() {
                    return Err(BackendError::InvalidConfig(
                        "remote backends require endpoint and model".into(),
                    ));
                }
                if self.kind == BackendKind::RemoteLogits && self.top_k_logprobs == 0 {
                    return Err(BackendError::InvalidConfig(
                        "top_k_logprobs must be positive".into(),
                    ));
                }
            }
            BackendKind::Fixture => {
                if self.fixture_path.is_none() {
                    return Err(BackendError::InvalidConfig(
                        "fixture backend requires fixture_path".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// One in-context demonstration: a pool premise with its hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub premise: String,
    pub hypothesis: String,
    pub kind: PromptKind,
}

/// Prompt layout for hypothesis generation: demonstration blocks, then the
/// query sentence, then the instruction.
pub fn render_generation_prompt(
    instruction: &InstructionPrompt,
    input: &str,
    demos: &[Demonstration],
) -> String {
    let mut s = String::new();
    for d in demos {
        s.push_str("Input: ");
        s.push_str(&d.premise);
        s.push_str("\nOutput: ");
        s.push_str(&d.hypothesis);
        s.push('\n');
    }
    s.push_str("Input: ");
    s.push_str(input);
    s.push('\n');
    s.push_str(&instruction.template);
    s.push_str("\nOutput:");
    s
}

/// A language model usable by the pipeline stages.
///
/// Implementations must be safe for concurrent use; every call is
/// independent.
pub trait LmBackend: Send + Sync {
    /// Short name recorded into triplet provenance.
    fn name(&self) -> &str;

    /// Whether [`LmBackend::next_token_logits`] is available.
    fn supports_logits(&self) -> bool;

    /// Logits for the next token given an instruction, the input sentence,
    /// and the generated prefix (token ids over this backend's vocabulary).
    fn next_token_logits(
        &self,
        instruction: &InstructionPrompt,
        input: &str,
        prefix: &[usize],
        demos: &[Demonstration],
    ) -> Result<LogitsVector, BackendError>;

    /// Text of a token id.
    fn token_text(&self, id: usize) -> Result<String, BackendError>;

    fn is_eos(&self, id: usize) -> bool;

    /// One-shot hypothesis generation; returns a non-empty string stripped
    /// of surrounding whitespace, or `EmptyGeneration` after retries.
    fn generate_text(
        &self,
        instruction: &InstructionPrompt,
        input: &str,
        demos: &[Demonstration],
    ) -> Result<String, BackendError>;

    /// Raw model text for the similarity of `(x, y)` under the scoring
    /// prompt. The caller parses it with [`parse_score`].
    fn score_similarity(
        &self,
        x: &str,
        y: &str,
        prompt: &InstructionPrompt,
    ) -> Result<String, BackendError>;
}

pub(crate) fn ensure_scoring_prompt(prompt: &InstructionPrompt) -> Result<(), BackendError> {
    if prompt.kind != PromptKind::Scoring {
        return Err(BackendError::InvalidRequest(format!(
            "prompt {:?} is not a scoring prompt",
            prompt.id
        )));
    }
    Ok(())
}

/// Extract the first decimal number from raw model text, requiring it to lie
/// in `[0, 5]`.
pub fn parse_score(raw: &str) -> Result<f64, BackendError> {
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    let re = NUMBER.get_or_init(|| Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)").unwrap());
    let m = re
        .find(raw)
        .ok_or_else(|| BackendError::NoNumberFound(raw.to_string()))?;
    let value: f64 = m
        .as_str()
        .parse()
        .map_err(|_| BackendError::NoNumberFound(raw.to_string()))?;
    if !(0.0..=5.0).contains(&value) {
        return Err(BackendError::OutOfRange(value));
    }
    Ok(value)
}

/// Run `attempt` up to `max_retries + 1` times, sleeping `base * 2^i`
/// between tries when `retryable` says the failure is transient.
pub(crate) fn with_retries<T>(
    max_retries: u32,
    base: Duration,
    retryable: impl Fn(&BackendError) -> bool,
    mut attempt: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut delay = base;
    let mut tries = 0;
    loop {
        match attempt() {
            Ok(v) => return Ok(v),
            Err(e) if tries < max_retries && retryable(&e) => {
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                delay *= 2;
                tries += 1;
            }
            Err(e) => return Err(e),
        }
    }
}
