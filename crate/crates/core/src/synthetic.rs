//! Synthetic desk-scale corpus with a learnable, non-lexical dev signal.
//!
//! Each premise draws from its own anchor token group `a{i}*`. Its
//! entailment copies some anchor tokens and adds bridge tokens `b{i}*`; its
//! contradiction uses a disjoint group `c{i}*`. Dev pairs compare a pure
//! anchor sentence against a pure bridge sentence (gold 5 for the same
//! premise, gold 0 across premises), so an untrained encoder scores near
//! zero and the anchor-bridge association is learnable only through the
//! contrastive objective.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{GenerationMode, Sentence, StsExample, Triplet, TripletMeta};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub premises: usize,
    /// Tokens per premise.
    pub anchor_tokens: usize,
    /// Premise tokens copied into the entailment.
    pub shared_tokens: usize,
    /// Fresh bridge tokens per entailment.
    pub bridge_tokens: usize,
    /// Tokens per contradiction.
    pub negative_tokens: usize,
    /// Function-word-like tokens shared by every corpus sentence. Zero keeps
    /// premises mutually token-disjoint; nonzero couples all sentences
    /// through shared embedding rows, the way natural sentences share
    /// function words.
    pub global_tokens: usize,
    /// Premises per paraphrase family (1 = no families). Family members
    /// share family tokens, so their hypotheses are genuine in-batch false
    /// negatives for each other, like near-duplicate premises in a real
    /// corpus.
    pub family_size: usize,
    /// Family tokens per sentence when families are enabled.
    pub family_tokens: usize,
    /// Total dev rows, alternating matched (gold 5) and mismatched (gold 0).
    pub dev_examples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            premises: 2000,
            anchor_tokens: 2,
            shared_tokens: 1,
            bridge_tokens: 2,
            negative_tokens: 2,
            global_tokens: 0,
            family_size: 1,
            family_tokens: 2,
            dev_examples: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub premises: Vec<Sentence>,
    pub triplets: Vec<Triplet>,
    pub dev: Vec<StsExample>,
}

fn join_tokens(prefix: &str, index: usize, count: usize) -> String {
    (0..count)
        .map(|j| format!("{prefix}{index}t{j}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn prefix_tokens(spec: &SyntheticSpec, index: usize) -> String {
    let mut parts = Vec::new();
    for j in 0..spec.global_tokens {
        parts.push(format!("gt{j}"));
    }
    if spec.family_size > 1 {
        let family = index / spec.family_size;
        for j in 0..spec.family_tokens {
            parts.push(format!("f{family}t{j}"));
        }
    }
    parts.join(" ")
}

fn with_prefix(spec: &SyntheticSpec, index: usize, rest: String) -> String {
    let prefix = prefix_tokens(spec, index);
    if prefix.is_empty() {
        rest
    } else {
        format!("{prefix} {rest}")
    }
}

pub fn premise_text(spec: &SyntheticSpec, index: usize) -> String {
    with_prefix(spec, index, join_tokens("a", index, spec.anchor_tokens))
}

pub fn bridge_text(spec: &SyntheticSpec, index: usize) -> String {
    join_tokens("b", index, spec.bridge_tokens)
}

fn entailment_text(spec: &SyntheticSpec, index: usize) -> String {
    let shared = join_tokens("a", index, spec.shared_tokens.min(spec.anchor_tokens));
    with_prefix(
        spec,
        index,
        format!("{shared} {}", bridge_text(spec, index)),
    )
}

fn contradiction_text(spec: &SyntheticSpec, index: usize) -> String {
    with_prefix(spec, index, join_tokens("c", index, spec.negative_tokens))
}

pub fn build(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.premises >= 2, "need at least two premises");
    assert!(spec.anchor_tokens >= 1 && spec.bridge_tokens >= 1 && spec.negative_tokens >= 1);
    let mut premises = Vec::with_capacity(spec.premises);
    let mut triplets = Vec::with_capacity(spec.premises);
    for i in 0..spec.premises {
        let sentence = Sentence::new(format!("p{i}"), premise_text(spec, i));
        let meta = TripletMeta {
            backend: "synthetic".into(),
            entail_prompt: "ent-1".into(),
            contra_prompt: "con-1".into(),
            omega: None,
            mode: GenerationMode::Direct,
        };
        triplets.push(Triplet::new(
            sentence.clone(),
            entailment_text(spec, i),
            contradiction_text(spec, i),
            meta,
        ));
        premises.push(sentence);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dev = Vec::with_capacity(spec.dev_examples);
    for k in 0..spec.dev_examples {
        let i = rng.random_range(0..spec.premises);
        if k % 2 == 0 {
            dev.push(StsExample {
                sent1: premise_text(spec, i),
                sent2: bridge_text(spec, i),
                gold: 5.0,
            });
        } else {
            // mismatches cross family boundaries, so gold 0 is truthful
            let family = |idx: usize| idx / spec.family_size.max(1);
            let mut j = rng.random_range(0..spec.premises);
            while family(j) == family(i) {
                j = (j + spec.family_size.max(1)) % spec.premises;
            }
            dev.push(StsExample {
                sent1: premise_text(spec, i),
                sent2: bridge_text(spec, j),
                gold: 0.0,
            });
        }
    }
    SyntheticCorpus {
        premises,
        triplets,
        dev,
    }
}

/// STS-style graded rows probing one premise's neighborhood: the target
/// premise is paired with sentences sharing k of the target pair's tokens
/// (the rest fresh noise tokens), gold = 5k/M. A rank metric over these
/// rows degrades smoothly as the target pair's embedding rows drift, which
/// makes localized training damage visible to Spearman.
pub fn graded_probe(
    spec: &SyntheticSpec,
    target: usize,
    rows: usize,
    seed: u64,
) -> Vec<StsExample> {
    let premise = premise_text(spec, target);
    let pool: Vec<String> = crate::encoder::tokenize(&format!(
        "{} {}",
        join_tokens("a", target, spec.anchor_tokens),
        bridge_text(spec, target)
    ));
    let levels = pool.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = Vec::with_capacity(rows);
    for r in 0..rows {
        let k = r % (levels + 1);
        // a seeded subset of the pool plus fresh noise fills the sentence
        let mut picks: Vec<usize> = (0..levels).collect();
        for i in (1..picks.len()).rev() {
            picks.swap(i, rng.random_range(0..=i));
        }
        let mut tokens: Vec<String> = picks[..k].iter().map(|&i| pool[i].clone()).collect();
        for j in 0..(levels - k) {
            tokens.push(format!("q{target}n{r}j{j}"));
        }
        dev.push(StsExample {
            sent1: premise.clone(),
            sent2: tokens.join(" "),
            gold: 5.0 * k as f64 / levels as f64,
        });
    }
    dev
}
