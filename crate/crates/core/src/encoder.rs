//! Small deterministic sentence encoder: FNV-1a hash embeddings, mean
//! pooling, and a linear projection. Closed-form enough for exact gradient
//! verification, expressive enough for desk-scale training runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("text has no tokens after normalization")]
    EmptyText,
    #[error("degenerate vector (norm below 1e-12)")]
    DegenerateVector,
}

pub type EmbeddingVector = Vec<f64>;

/// Parameters of the trainable encoder: a `buckets x dim` embedding table
/// and a `dim x dim` projection, both row-major f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub buckets: usize,
    pub dim: usize,
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
}

impl EncoderParams {
    /// Seeded uniform init in [-0.5, 0.5).
    pub fn init(buckets: usize, dim: usize, seed: u64) -> Self {
        assert!(buckets >= 1 && dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = (0..buckets * dim)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let projection = (0..dim * dim).map(|_| rng.random::<f64>() - 0.5).collect();
        Self {
            buckets,
            dim,
            embedding,
            projection,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.buckets < 1 || self.dim < 1 {
            return Err("buckets and dim must be >= 1".into());
        }
        if self.embedding.len() != self.buckets * self.dim {
            return Err(format!(
                "embedding has {} entries, expected {}",
                self.embedding.len(),
                self.buckets * self.dim
            ));
        }
        if self.projection.len() != self.dim * self.dim {
            return Err(format!(
                "projection has {} entries, expected {}",
                self.projection.len(),
                self.dim * self.dim
            ));
        }
        if self
            .embedding
            .iter()
            .chain(&self.projection)
            .any(|v| !v.is_finite())
        {
            return Err("non-finite parameter entry".into());
        }
        Ok(())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Lowercase, split on whitespace and punctuation (any non-alphanumeric).
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hash each token to its embedding bucket.
pub fn token_buckets(text: &str, buckets: usize) -> Vec<usize> {
    tokenize(text)
        .iter()
        .map(|t| (fnv1a64(t.as_bytes()) % buckets as u64) as usize)
        .collect()
}

/// Mean-pool the bucket rows, then apply the projection.
pub(crate) fn embed_buckets(params: &EncoderParams, buckets: &[usize]) -> EmbeddingVector {
    let d = params.dim;
    let mut pooled = vec![0.0; d];
    for &b in buckets {
        let row = &params.embedding[b * d..(b + 1) * d];
        for (p, &r) in pooled.iter_mut().zip(row) {
            *p += r;
        }
    }
    let inv = 1.0 / buckets.len() as f64;
    for p in pooled.iter_mut() {
        *p *= inv;
    }
    let mut out = vec![0.0; d];
    for (j, o) in out.iter_mut().enumerate() {
        let row = &params.projection[j * d..(j + 1) * d];
        let mut acc = 0.0;
        for (&w, &u) in row.iter().zip(&pooled) {
            acc += w * u;
        }
        *o = acc;
    }
    out
}

/// Deterministic sentence embedding.
pub fn embed(params: &EncoderParams, text: &str) -> Result<EmbeddingVector, EmbedError> {
    let buckets = token_buckets(text, params.buckets);
    if buckets.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    Ok(embed_buckets(params, &buckets))
}

pub(crate) const NORM_EPS: f64 = 1e-12;

/// Cosine similarity; errors when either norm falls below 1e-12.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    debug_assert_eq!(u.len(), v.len());
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let nu = nu.sqrt();
    let nv = nv.sqrt();
    if nu < NORM_EPS || nv < NORM_EPS {
        return Err(EmbedError::DegenerateVector);
    }
    Ok(dot / (nu * nv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("A man, plays-guitar!  Loudly?"),
            vec!["a", "man", "plays", "guitar", "loudly"]
        );
        assert!(tokenize("?!...").is_empty());
    }

    #[test]
    fn fnv_known_vectors() {
        // standard FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn embed_is_deterministic() {
        let params = EncoderParams::init(64, 8, 7);
        let a = embed(&params, "the same text").unwrap();
        let b = embed(&params, "the same text").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_errors() {
        let params = EncoderParams::init(64, 8, 7);
        assert_eq!(embed(&params, ""), Err(EmbedError::EmptyText));
        assert_eq!(embed(&params, " ?! "), Err(EmbedError::EmptyText));
    }

    #[test]
    fn single_token_is_projected_row() {
        let params = EncoderParams::init(64, 8, 7);
        let out = embed(&params, "token").unwrap();
        let b = token_buckets("token", params.buckets)[0];
        let d = params.dim;
        let row = &params.embedding[b * d..(b + 1) * d];
        for (j, &out_j) in out.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &r) in row.iter().enumerate() {
                acc += params.projection[j * d + k] * r;
            }
            assert_eq!(out_j, acc);
        }
    }

    #[test]
    fn cosine_basics() {
        let u = vec![1.0, 2.0, 3.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmbedError::DegenerateVector)
        );
    }

    #[test]
    fn identical_seeds_identical_params() {
        assert_eq!(
            EncoderParams::init(128, 16, 3),
            EncoderParams::init(128, 16, 3)
        );
        assert_ne!(
            EncoderParams::init(128, 16, 3),
            EncoderParams::init(128, 16, 4)
        );
    }
}
