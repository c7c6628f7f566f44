//! MultiCSR: multi-level corpus refinement for contrastive sentence
//! representation learning.
//!
//! The pipeline has three refinement stages:
//!
//! 1. **Contrastive generation** ([`generate`]) — for each premise, decode an
//!    entailment and a contradiction hypothesis greedily from the combined
//!    logits `l - omega * l_hat`, where `l_hat` comes from the opposite
//!    instruction. Logit-less backends fall back to direct generation.
//! 2. **Self-curation** ([`curate`]) — the language model scores the semantic
//!    similarity of both pairs of each triplet on a 0..5 scale; a triplet is
//!    kept only when `a >= alpha`, `b <= beta`, and `a >= b + gamma`.
//! 3. **Masked in-batch training** ([`train`], [`loss`], [`mask`]) — a small
//!    deterministic encoder is fit with an InfoNCE objective whose in-batch
//!    negatives are masked whenever a fixed reference embedder rates them too
//!    similar to the anchor (false negatives).
//!
//! [`corpus`] holds the domain types and JSONL persistence shared by every
//! stage, [`backend`] the language-model clients (including a deterministic
//! fixture LM for exact tests), [`encoder`] the trainable hash encoder, and
//! [`eval`] the Spearman / retrieval-accuracy evaluation.

pub mod backend;
pub mod corpus;
pub mod curate;
pub mod encoder;
pub mod eval;
pub mod generate;
pub mod loss;
pub mod mask;
pub mod prompts;
pub mod synthetic;
pub mod train;
