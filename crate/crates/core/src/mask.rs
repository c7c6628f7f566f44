//! False-negative mask construction from a fixed reference embedder.
//!
//! The mask zeroes an in-batch denominator term exactly when the candidate
//! comes from a *different* triplet (index inequality) and the reference
//! similarity between the anchor premise and the candidate hypothesis
//! reaches the threshold. An anchor's own positive and own hard negative
//! are never masked.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::corpus::Triplet;
use crate::encoder::{self, EncoderParams, NORM_EPS};
use crate::train::TrainError;

/// A fixed, non-trainable embedding function used only for mask construction
/// and demonstration retrieval. Must be deterministic within a run.
pub trait ReferenceEmbed: Send + Sync {
    fn embed_ref(&self, text: &str) -> Result<Vec<f64>, TrainError>;
}

/// Reference vectors loaded from a file of `{"text":…,"vector":[…]}` rows.
pub struct VectorTable {
    vectors: HashMap<String, Vec<f64>>,
}

impl VectorTable {
    pub fn new(vectors: HashMap<String, Vec<f64>>) -> Self {
        Self { vectors }
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrainError> {
        #[derive(serde::Deserialize)]
        struct Row {
            text: String,
            vector: Vec<f64>,
        }
        let mut vectors = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let row: Row = serde_json::from_str(line)
                .map_err(|e| TrainError::Reference(format!("vector file line {}: {e}", idx + 1)))?;
            vectors.insert(row.text, row.vector);
        }
        Ok(Self { vectors })
    }
}

impl ReferenceEmbed for VectorTable {
    fn embed_ref(&self, text: &str) -> Result<Vec<f64>, TrainError> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| TrainError::Reference(format!("no reference vector for {text:?}")))
    }
}

/// A frozen encoder checkpoint acting as the reference model.
pub struct ParamsEmbedder {
    params: EncoderParams,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl ParamsEmbedder {
    pub fn new(params: EncoderParams) -> Self {
        Self {
            params,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl ReferenceEmbed for ParamsEmbedder {
    fn embed_ref(&self, text: &str) -> Result<Vec<f64>, TrainError> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = encoder::embed(&self.params, text).map_err(|e| TrainError::Embed {
            sentence: text.to_string(),
            source: e,
        })?;
        self.cache
            .lock()
            .unwrap()
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// In-batch mask over (anchor, candidate, polarity); `true` keeps the term.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    n: usize,
    pos: Vec<bool>,
    neg: Vec<bool>,
}

impl MaskMatrix {
    /// The unmasked objective: every term kept.
    pub fn all_ones(n: usize) -> Self {
        Self {
            n,
            pos: vec![true; n * n],
            neg: vec![true; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn included(&self, anchor: usize, candidate: usize, polarity: Polarity) -> bool {
        match polarity {
            Polarity::Positive => self.pos[anchor * self.n + candidate],
            Polarity::Negative => self.neg[anchor * self.n + candidate],
        }
    }

    pub fn set(&mut self, anchor: usize, candidate: usize, polarity: Polarity, included: bool) {
        match polarity {
            Polarity::Positive => self.pos[anchor * self.n + candidate] = included,
            Polarity::Negative => self.neg[anchor * self.n + candidate] = included,
        }
    }

    /// Count of masked-out (zero) entries.
    pub fn masked_count(&self) -> usize {
        self.pos.iter().chain(&self.neg).filter(|&&m| !m).count()
    }

    /// Diagonal terms (own positive, own hard negative) must always be kept.
    pub fn check(&self) -> Result<(), String> {
        for i in 0..self.n {
            if !self.included(i, i, Polarity::Positive) || !self.included(i, i, Polarity::Negative)
            {
                return Err(format!("diagonal entry masked at anchor {i}"));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Build the mask for one batch: entry (i, k, p) is zero iff `k != i` and
/// the reference cosine between premise i and hypothesis (k, p) is `>=
/// sigma`.
pub fn build_mask(
    reference: &dyn ReferenceEmbed,
    batch: &[Triplet],
    sigma: f64,
) -> Result<MaskMatrix, TrainError> {
    let n = batch.len();
    let mut anchors = Vec::with_capacity(n);
    let mut pos_cands = Vec::with_capacity(n);
    let mut neg_cands = Vec::with_capacity(n);
    for t in batch {
        let describe = |role: &str| format!("{} ({role})", t.id);
        let a = reference.embed_ref(&t.premise.text)?;
        if norm(&a) < NORM_EPS {
            return Err(TrainError::DegenerateVector {
                sentence: describe("premise"),
            });
        }
        let p = reference.embed_ref(&t.entailment)?;
        if norm(&p) < NORM_EPS {
            return Err(TrainError::DegenerateVector {
                sentence: describe("entailment"),
            });
        }
        let ng = reference.embed_ref(&t.contradiction)?;
        if norm(&ng) < NORM_EPS {
            return Err(TrainError::DegenerateVector {
                sentence: describe("contradiction"),
            });
        }
        anchors.push(a);
        pos_cands.push(p);
        neg_cands.push(ng);
    }
    let mut mask = MaskMatrix::all_ones(n);
    for (i, anchor) in anchors.iter().enumerate() {
        for k in 0..n {
            if k == i {
                continue;
            }
            let sim_pos = encoder::cosine_sim(anchor, &pos_cands[k]).map_err(|_| {
                TrainError::DegenerateVector {
                    sentence: format!("{} (entailment)", batch[k].id),
                }
            })?;
            if sim_pos >= sigma {
                mask.set(i, k, Polarity::Positive, false);
            }
            let sim_neg = encoder::cosine_sim(anchor, &neg_cands[k]).map_err(|_| {
                TrainError::DegenerateVector {
                    sentence: format!("{} (contradiction)", batch[k].id),
                }
            })?;
            if sim_neg >= sigma {
                mask.set(i, k, Polarity::Negative, false);
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GenerationMode, Sentence, TripletMeta};

    fn triplet(id: &str, premise: &str, pos: &str, neg: &str) -> Triplet {
        Triplet::new(
            Sentence::new(id, premise),
            pos,
            neg,
            TripletMeta {
                backend: "test".into(),
                entail_prompt: "ent-1".into(),
                contra_prompt: "con-1".into(),
                omega: None,
                mode: GenerationMode::Direct,
            },
        )
    }

    fn table(entries: &[(&str, Vec<f64>)]) -> VectorTable {
        VectorTable::new(
            entries
                .iter()
                .map(|(t, v)| (t.to_string(), v.clone()))
                .collect(),
        )
    }

    #[test]
    fn cross_anchor_above_sigma_is_masked() {
        // premise p0 vs entailment of t1: cosine 0.95
        let reference = table(&[
            ("x0", vec![1.0, 0.0]),
            ("p0", vec![1.0, 0.0]),
            ("n0", vec![1.0, 0.0]),
            ("x1", vec![0.0, 1.0]),
            ("p1", vec![0.95, (1.0f64 - 0.95 * 0.95).sqrt()]),
            ("n1", vec![-1.0, 0.0]),
        ]);
        let batch = vec![
            triplet("t0", "x0", "p0", "n0"),
            triplet("t1", "x1", "p1", "n1"),
        ];
        let mask = build_mask(&reference, &batch, 0.9).unwrap();
        assert!(!mask.included(0, 1, Polarity::Positive));
        // below threshold stays included
        assert!(mask.included(1, 0, Polarity::Negative));
    }

    #[test]
    fn own_terms_never_masked_even_at_similarity_one() {
        let reference = table(&[
            ("x0", vec![1.0, 0.0]),
            ("p0", vec![1.0, 0.0]),
            ("n0", vec![1.0, 0.0]),
        ]);
        let batch = vec![triplet("t0", "x0", "p0", "n0")];
        let mask = build_mask(&reference, &batch, 0.9).unwrap();
        assert!(mask.included(0, 0, Polarity::Positive));
        assert!(mask.included(0, 0, Polarity::Negative));
        assert_eq!(mask.masked_count(), 0);
    }

    #[test]
    fn just_below_sigma_is_kept() {
        let s = 0.89f64;
        let reference = table(&[
            ("x0", vec![1.0, 0.0]),
            ("p0", vec![0.0, 1.0]),
            ("n0", vec![0.0, 1.0]),
            ("x1", vec![0.0, 1.0]),
            ("p1", vec![s, (1.0f64 - s * s).sqrt()]),
            ("n1", vec![0.0, 1.0]),
        ]);
        let batch = vec![
            triplet("t0", "x0", "p0", "n0"),
            triplet("t1", "x1", "p1", "n1"),
        ];
        let mask = build_mask(&reference, &batch, 0.9).unwrap();
        assert!(mask.included(0, 1, Polarity::Positive));
    }

    #[test]
    fn lower_sigma_masks_a_superset() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.random_range(2..6);
            let mut entries = Vec::new();
            let mut batch = Vec::new();
            for i in 0..n {
                let mut vec_for = |name: String| {
                    let v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
                    entries.push((name, v));
                };
                vec_for(format!("x{i}"));
                vec_for(format!("p{i}"));
                vec_for(format!("n{i}"));
                batch.push(triplet(
                    &format!("t{i}"),
                    &format!("x{i}"),
                    &format!("p{i}"),
                    &format!("n{i}"),
                ));
            }
            let reference = VectorTable::new(entries.into_iter().collect());
            let lo = rng.random::<f64>() * 0.5;
            let hi = lo + rng.random::<f64>() * 0.5;
            let mask_lo = build_mask(&reference, &batch, lo).unwrap();
            let mask_hi = build_mask(&reference, &batch, hi).unwrap();
            for i in 0..n {
                for k in 0..n {
                    for polarity in [Polarity::Positive, Polarity::Negative] {
                        if !mask_hi.included(i, k, polarity) {
                            assert!(
                                !mask_lo.included(i, k, polarity),
                                "zero-set of sigma={hi} not within sigma={lo}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_reference_vector_names_the_sentence() {
        let reference = table(&[
            ("x0", vec![1.0, 0.0]),
            ("p0", vec![0.0, 0.0]),
            ("n0", vec![0.0, 1.0]),
        ]);
        let batch = vec![triplet("t0", "x0", "p0", "n0")];
        match build_mask(&reference, &batch, 0.9) {
            Err(TrainError::DegenerateVector { sentence }) => {
                assert!(sentence.contains("t0") && sentence.contains("entailment"));
            }
            other => panic!("expected DegenerateVector, got {other:?}"),
        }
    }
}
