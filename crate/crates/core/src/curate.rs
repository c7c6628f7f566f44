//! Stage 2: LLM self-curation of generated triplets.
//!
//! Each triplet's two pairs are scored with the same scoring prompt:
//! `a` for (premise, entailment) and `b` for (premise, contradiction), both
//! in [0, 5]. A triplet survives iff `a >= alpha`, `b <= beta`, and
//! `a >= b + gamma` (all non-strict).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{parse_score, BackendError, LmBackend};
use crate::corpus::{CurationPolicy, ScoredTriplet, Triplet};
use crate::generate::SkipRecord;
use crate::prompts::InstructionPrompt;

#[derive(Debug, Error)]
pub enum CurateError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("triplet {triplet_id:?} is unscorable after retries: {reason}")]
    Unscorable { triplet_id: String, reason: String },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Outcome counts of one curation pass. A triplet failing several rules is
/// attributed to the first failing rule in (a, b, margin) order;
/// `dropped_unscorable` is filled by the scoring stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub input: usize,
    pub kept: usize,
    pub dropped_low_a: usize,
    pub dropped_high_b: usize,
    pub dropped_margin: usize,
    pub dropped_unscorable: usize,
    pub policy: CurationPolicy,
}

impl CurationReport {
    /// Counts must partition the input exactly.
    pub fn check(&self) -> Result<(), String> {
        let total = self.kept
            + self.dropped_low_a
            + self.dropped_high_b
            + self.dropped_margin
            + self.dropped_unscorable;
        if total != self.input {
            return Err(format!("counts sum to {total}, input is {}", self.input));
        }
        Ok(())
    }
}

/// Score one triplet's pairs with the identical scoring template. Parse
/// failures are retried up to `max_retries` per pair; a triplet that still
/// fails is unscorable and must be dropped and counted, never given a
/// default score.
pub fn score_triplet(
    backend: &dyn LmBackend,
    triplet: &Triplet,
    prompt: &InstructionPrompt,
    max_retries: u32,
) -> Result<ScoredTriplet, CurateError> {
    let score_pair = |y: &str| -> Result<f64, CurateError> {
        let mut last_reason = String::new();
        for _ in 0..=max_retries {
            let raw = backend.score_similarity(&triplet.premise.text, y, prompt)?;
            match parse_score(&raw) {
                Ok(v) => return Ok(v),
                Err(e @ (BackendError::NoNumberFound(_) | BackendError::OutOfRange(_))) => {
                    last_reason = e.to_string();
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(CurateError::Unscorable {
            triplet_id: triplet.id.clone(),
            reason: last_reason,
        })
    };
    let a = score_pair(&triplet.entailment)?;
    let b = score_pair(&triplet.contradiction)?;
    Ok(ScoredTriplet {
        triplet: triplet.clone(),
        a,
        b,
    })
}

/// The curation predicate of one scored triplet.
pub fn passes(scored: &ScoredTriplet, policy: &CurationPolicy) -> bool {
    scored.a >= policy.alpha && scored.b <= policy.beta && scored.a >= scored.b + policy.gamma
}

/// Pure filter: keep triplets passing all three inequalities, preserving
/// input order.
pub fn curate(
    scored: &[ScoredTriplet],
    policy: &CurationPolicy,
) -> Result<(Vec<Triplet>, CurationReport), CurateError> {
    policy.validate().map_err(CurateError::InvalidPolicy)?;
    let mut report = CurationReport {
        input: scored.len(),
        kept: 0,
        dropped_low_a: 0,
        dropped_high_b: 0,
        dropped_margin: 0,
        dropped_unscorable: 0,
        policy: *policy,
    };
    let mut kept = Vec::new();
    for s in scored {
        if s.a < policy.alpha {
            report.dropped_low_a += 1;
        } else if s.b > policy.beta {
            report.dropped_high_b += 1;
        } else if s.a < s.b + policy.gamma {
            report.dropped_margin += 1;
        } else {
            report.kept += 1;
            kept.push(s.triplet.clone());
        }
    }
    debug_assert!(report.check().is_ok());
    Ok((kept, report))
}

/// Kept-count per policy over the same scored set.
pub fn sweep_policies(
    scored: &[ScoredTriplet],
    grid: &[CurationPolicy],
) -> Result<Vec<(CurationPolicy, usize)>, CurateError> {
    if grid.is_empty() {
        return Err(CurateError::InvalidPolicy("empty policy grid".into()));
    }
    grid.iter()
        .map(|policy| curate(scored, policy).map(|(kept, _)| (*policy, kept.len())))
        .collect()
}

/// Stage driver: score a whole triplet file with a bounded worker pool.
/// Unscorable triplets become skip records; transport failures abort.
pub fn score_corpus(
    backend: &dyn LmBackend,
    triplets: &[Triplet],
    prompt: &InstructionPrompt,
    max_retries: u32,
    workers: usize,
) -> Result<(Vec<ScoredTriplet>, Vec<SkipRecord>), CurateError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CurateError::Backend(BackendError::InvalidConfig(e.to_string())))?;
    let results: Vec<Result<ScoredTriplet, CurateError>> = pool.install(|| {
        triplets
            .par_iter()
            .map(|t| score_triplet(backend, t, prompt, max_retries))
            .collect()
    });
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for (triplet, result) in triplets.iter().zip(results) {
        match result {
            Ok(s) => scored.push(s),
            Err(e @ CurateError::Unscorable { .. }) => skipped.push(SkipRecord {
                id: triplet.id.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((scored, skipped))
}
