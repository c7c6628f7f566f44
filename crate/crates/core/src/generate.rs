//! Stage 1: contrastive hypothesis generation.
//!
//! For each premise, one entailment/contradiction prompt pair is drawn
//! uniformly. The entailment hypothesis is decoded greedily from
//! `l - omega * l_hat`, where `l` conditions on the entailment instruction
//! and `l_hat` on the contradiction instruction with the same generated
//! prefix; the contradiction hypothesis swaps the two roles. Logit-less
//! backends use direct generation under the original instruction only.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Demonstration, LmBackend, LogitsVector};
use crate::corpus::{GenerationMode, Sentence, Triplet, TripletMeta};
use crate::encoder;
use crate::mask::ReferenceEmbed;
use crate::prompts::{InstructionPrompt, PromptCatalog, PromptKind};
use crate::train::{splitmix64, TrainError};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("logits dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty generation (eos at step 0 or whitespace-only output)")]
    EmptyGeneration,
    #[error("contrastive mode requires a logits-capable backend, got {0:?}")]
    LogitsUnsupported(String),
    #[error("generation failed for premise {premise_id:?} ({kind:?}): {source}")]
    GenerationFailed {
        premise_id: String,
        kind: PromptKind,
        #[source]
        source: Box<GenerateError>,
    },
    #[error("demonstration retrieval: {0}")]
    Demo(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Smoothing coefficient on the noisy-instruction logits.
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Drives prompt-pair selection.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: GenerationMode,
}

fn default_omega() -> f64 {
    0.3
}
fn default_max_tokens() -> usize {
    64
}
fn default_mode() -> GenerationMode {
    GenerationMode::Contrastive
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            omega: default_omega(),
            max_tokens: default_max_tokens(),
            seed: 0,
            mode: default_mode(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if !(-1.0..=1.0).contains(&self.omega) {
            return Err(GenerateError::Backend(BackendError::InvalidConfig(
                format!("omega = {} outside [-1, 1]", self.omega),
            )));
        }
        if self.max_tokens == 0 {
            return Err(GenerateError::Backend(BackendError::InvalidConfig(
                "max_tokens must be >= 1".into(),
            )));
        }
        Ok(())
    }
}

/// Demonstration retrieval settings (supervised mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    /// Demonstration count L.
    pub count: usize,
    /// Similarity floor lambda.
    pub lambda: f64,
}

impl DemoConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.count < 1 {
            return Err(GenerateError::Backend(BackendError::InvalidConfig(
                "demo count L must be >= 1".into(),
            )));
        }
        if !(-1.0..=1.0).contains(&self.lambda) {
            return Err(GenerateError::Backend(BackendError::InvalidConfig(
                format!("lambda = {} outside [-1, 1]", self.lambda),
            )));
        }
        Ok(())
    }
}

/// Uniformly pick the original instruction of `kind` and a noisy
/// instruction of the opposite kind; deterministic in the rng state.
pub fn select_prompt_pair<'a>(
    catalog: &'a PromptCatalog,
    kind: PromptKind,
    rng: &mut impl Rng,
) -> (&'a InstructionPrompt, &'a InstructionPrompt) {
    let original_pool = catalog.of_kind(kind);
    let noisy_pool = catalog.of_kind(kind.opposite());
    let original = &original_pool[rng.random_range(0..original_pool.len())];
    let noisy = &noisy_pool[rng.random_range(0..noisy_pool.len())];
    (original, noisy)
}

/// Elementwise `l - omega * l_hat`.
pub fn combine_logits(
    l: &LogitsVector,
    l_hat: &LogitsVector,
    omega: f64,
) -> Result<LogitsVector, GenerateError> {
    if l.vocab_size() != l_hat.vocab_size() {
        return Err(GenerateError::DimensionMismatch {
            left: l.vocab_size(),
            right: l_hat.vocab_size(),
        });
    }
    let values = l
        .values()
        .iter()
        .zip(l_hat.values())
        .map(|(&a, &b)| a - omega * b)
        .collect();
    Ok(LogitsVector::new(values)?)
}

/// Grow the shorter vector with its fill value so both cover the same
/// vocabulary (remote backends' token registry grows between the two
/// streams' calls).
fn align_vocab(l: &mut LogitsVector, l_hat: &mut LogitsVector) -> Result<(), GenerateError> {
    let len = l.vocab_size().max(l_hat.vocab_size());
    l.extend_to(len)?;
    l_hat.extend_to(len)?;
    Ok(())
}

/// Greedy decode over the combined logits with a fixed prompt pair; both
/// streams see the same generated prefix at every step.
pub fn generate_hypothesis_with(
    backend: &dyn LmBackend,
    premise_text: &str,
    original: &InstructionPrompt,
    noisy: &InstructionPrompt,
    config: &GenerationConfig,
    demos: &[Demonstration],
) -> Result<String, GenerateError> {
    config.validate()?;
    match config.mode {
        GenerationMode::Direct => {
            let text = backend.generate_text(original, premise_text, demos)?;
            if text.trim().is_empty() {
                return Err(GenerateError::EmptyGeneration);
            }
            Ok(text.trim().to_string())
        }
        GenerationMode::Contrastive => {
            if !backend.supports_logits() {
                return Err(GenerateError::LogitsUnsupported(backend.name().to_string()));
            }
            let mut prefix: Vec<usize> = Vec::new();
            let mut out = String::new();
            for _ in 0..config.max_tokens {
                let mut l = backend.next_token_logits(original, premise_text, &prefix, demos)?;
                let mut l_hat = backend.next_token_logits(noisy, premise_text, &prefix, demos)?;
                align_vocab(&mut l, &mut l_hat)?;
                let combined = combine_logits(&l, &l_hat, config.omega)?;
                let token = combined.argmax();
                if backend.is_eos(token) {
                    break;
                }
                out.push_str(&backend.token_text(token)?);
                prefix.push(token);
            }
            if prefix.is_empty() || out.trim().is_empty() {
                return Err(GenerateError::EmptyGeneration);
            }
            Ok(out.trim().to_string())
        }
    }
}

/// Select a prompt pair for `kind` (seeded by `config.seed`) and decode one
/// hypothesis; returns the text with the (original, noisy) prompt ids.
pub fn generate_hypothesis(
    backend: &dyn LmBackend,
    premise: &Sentence,
    kind: PromptKind,
    config: &GenerationConfig,
    catalog: &PromptCatalog,
    demos: &[Demonstration],
) -> Result<(String, (String, String)), GenerateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (original, noisy) = select_prompt_pair(catalog, kind, &mut rng);
    let text = generate_hypothesis_with(backend, &premise.text, original, noisy, config, demos)?;
    Ok((text, (original.id.clone(), noisy.id.clone())))
}

/// Generate the full triplet for one premise. The same prompt pair serves
/// both hypotheses with roles swapped: the entailment decodes with
/// (original = entailment prompt, noisy = contradiction prompt) and the
/// contradiction with the two swapped.
pub fn generate_triplet(
    backend: &dyn LmBackend,
    premise: &Sentence,
    config: &GenerationConfig,
    catalog: &PromptCatalog,
    demos_entail: &[Demonstration],
    demos_contra: &[Demonstration],
    max_retries: u32,
) -> Result<Triplet, GenerateError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (entail_prompt, contra_prompt) =
        select_prompt_pair(catalog, PromptKind::Entailment, &mut rng);

    let attempt = |original: &InstructionPrompt,
                   noisy: &InstructionPrompt,
                   demos: &[Demonstration],
                   kind: PromptKind|
     -> Result<String, GenerateError> {
        let mut last = None;
        for _ in 0..=max_retries {
            match generate_hypothesis_with(backend, &premise.text, original, noisy, config, demos) {
                Ok(text) => return Ok(text),
                Err(e) => last = Some(e),
            }
        }
        Err(GenerateError::GenerationFailed {
            premise_id: premise.id.clone(),
            kind,
            source: Box::new(last.expect("at least one attempt")),
        })
    };

    let entailment = attempt(
        entail_prompt,
        contra_prompt,
        demos_entail,
        PromptKind::Entailment,
    )?;
    let contradiction = attempt(
        contra_prompt,
        entail_prompt,
        demos_contra,
        PromptKind::Contradiction,
    )?;

    let meta = TripletMeta {
        backend: backend.name().to_string(),
        entail_prompt: entail_prompt.id.clone(),
        contra_prompt: contra_prompt.id.clone(),
        omega: match config.mode {
            GenerationMode::Contrastive => Some(config.omega),
            GenerationMode::Direct => None,
        },
        mode: config.mode,
    };
    Ok(Triplet::new(
        premise.clone(),
        entailment,
        contradiction,
        meta,
    ))
}

/// One entry of the demonstration pool: a premise with one of its
/// hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoPoolEntry {
    pub premise: String,
    pub hypothesis: String,
    pub kind: PromptKind,
}

/// Retrieve at most L pool entries whose premise-to-query cosine similarity
/// reaches the floor, in descending similarity order (ties by pool index).
pub fn retrieve_demonstrations(
    embedder: &dyn ReferenceEmbed,
    pool: &[DemoPoolEntry],
    query: &Sentence,
    config: &DemoConfig,
) -> Result<Vec<Demonstration>, GenerateError> {
    config.validate()?;
    let query_vec = embedder.embed_ref(&query.text)?;
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (idx, entry) in pool.iter().enumerate() {
        let v = embedder.embed_ref(&entry.premise)?;
        let sim = encoder::cosine_sim(&query_vec, &v).map_err(|_| {
            GenerateError::Demo(TrainError::DegenerateVector {
                sentence: entry.premise.clone(),
            })
        })?;
        if sim >= config.lambda {
            scored.push((idx, sim));
        }
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite cosine")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(config.count);
    Ok(scored
        .into_iter()
        .map(|(idx, _)| Demonstration {
            premise: pool[idx].premise.clone(),
            hypothesis: pool[idx].hypothesis.clone(),
            kind: pool[idx].kind,
        })
        .collect())
}

/// Skip-report row for premises whose generation failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub id: String,
    pub reason: String,
}

/// Per-premise seed, independent of worker scheduling.
pub fn premise_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

/// Stage driver: generate triplets for a whole premise file with a bounded
/// worker pool. Output order equals input order regardless of completion
/// order; failed premises land in the skip report, never silently dropped.
#[allow(clippy::too_many_arguments)]
pub fn generate_corpus(
    backend: &dyn LmBackend,
    premises: &[Sentence],
    config: &GenerationConfig,
    catalog: &PromptCatalog,
    demo: Option<(&dyn ReferenceEmbed, &[DemoPoolEntry], &DemoConfig)>,
    workers: usize,
    max_retries: u32,
) -> Result<(Vec<Triplet>, Vec<SkipRecord>), GenerateError> {
    config.validate()?;
    if let Some((_, _, demo_config)) = demo {
        demo_config.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| GenerateError::Backend(BackendError::InvalidConfig(e.to_string())))?;
    let results: Vec<Result<Triplet, GenerateError>> = pool.install(|| {
        premises
            .par_iter()
            .enumerate()
            .map(|(index, premise)| {
                let per_config = GenerationConfig {
                    seed: premise_seed(config.seed, index),
                    ..config.clone()
                };
                let (demos_entail, demos_contra) = match demo {
                    Some((embedder, pool_entries, demo_config)) => {
                        let of_kind =
                            |kind: PromptKind| -> Result<Vec<Demonstration>, GenerateError> {
                                let filtered: Vec<DemoPoolEntry> = pool_entries
                                    .iter()
                                    .filter(|e| e.kind == kind)
                                    .cloned()
                                    .collect();
                                retrieve_demonstrations(embedder, &filtered, premise, demo_config)
                            };
                        (
                            of_kind(PromptKind::Entailment)?,
                            of_kind(PromptKind::Contradiction)?,
                        )
                    }
                    None => (Vec::new(), Vec::new()),
                };
                generate_triplet(
                    backend,
                    premise,
                    &per_config,
                    catalog,
                    &demos_entail,
                    &demos_contra,
                    max_retries,
                )
            })
            .collect()
    });
    let mut triplets = Vec::new();
    let mut skipped = Vec::new();
    for (premise, result) in premises.iter().zip(results) {
        match result {
            Ok(t) => triplets.push(t),
            Err(e @ GenerateError::GenerationFailed { .. }) => skipped.push(SkipRecord {
                id: premise.id.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((triplets, skipped))
}
