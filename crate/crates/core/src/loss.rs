//! Masked InfoNCE objective and its analytic gradient.
//!
//! For a batch of N triplets with encoder outputs `h_i` (premise), `e+_k`
//! (entailment), `e-_k` (contradiction), the per-anchor loss is
//!
//! ```text
//! -log( exp(sim(h_i, e+_i)/tau)
//!       / sum_k sum_p M[i,k,p] * exp(sim(h_i, e_p^k)/tau) )
//! ```
//!
//! and the batch loss is the mean over anchors. The anchor's own positive
//! and own hard negative always sit in the denominator (the mask never
//! removes the diagonal), so the loss is strictly positive. Each anchor's
//! denominator uses log-sum-exp with max subtraction; at tau = 0.05 the raw
//! exponents reach +-20.

use crate::corpus::Triplet;
use crate::encoder::{self, EncoderParams, NORM_EPS};
use crate::mask::{MaskMatrix, Polarity};
use crate::train::TrainError;

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
}

fn validate(batch: &[Triplet], mask: &MaskMatrix, tau: f64) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    if mask.len() != batch.len() {
        return Err(TrainError::InvalidMask(format!(
            "mask is {}x{} but batch has {} triplets",
            mask.len(),
            mask.len(),
            batch.len()
        )));
    }
    mask.check().map_err(TrainError::InvalidMask)?;
    if !tau.is_finite() || tau <= 0.0 {
        return Err(TrainError::InvalidConfig(format!(
            "tau = {tau} must be > 0"
        )));
    }
    Ok(())
}

/// Sentence texts of a batch in embedding order: premises, then
/// entailments, then contradictions.
fn batch_texts(batch: &[Triplet]) -> Vec<(&str, String)> {
    let mut texts = Vec::with_capacity(3 * batch.len());
    for t in batch {
        texts.push((t.premise.text.as_str(), format!("{} (premise)", t.id)));
    }
    for t in batch {
        texts.push((t.entailment.as_str(), format!("{} (entailment)", t.id)));
    }
    for t in batch {
        texts.push((
            t.contradiction.as_str(),
            format!("{} (contradiction)", t.id),
        ));
    }
    texts
}

fn normalize(
    embeddings: Vec<Vec<f64>>,
    labels: &[(&str, String)],
) -> Result<(Vec<Vec<f64>>, Vec<f64>), TrainError> {
    let mut normed = Vec::with_capacity(embeddings.len());
    let mut norms = Vec::with_capacity(embeddings.len());
    for (e, (_, label)) in embeddings.into_iter().zip(labels) {
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(TrainError::DegenerateVector {
                sentence: label.clone(),
            });
        }
        normed.push(e.iter().map(|x| x / norm).collect());
        norms.push(norm);
    }
    Ok((normed, norms))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-anchor losses given normalized embeddings laid out as
/// `[premises | entailments | contradictions]`.
fn anchor_losses(
    normed: &[Vec<f64>],
    mask: &MaskMatrix,
    tau: f64,
    n: usize,
) -> Result<Vec<f64>, TrainError> {
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let anchor = &normed[i];
        let mut z_max = f64::NEG_INFINITY;
        let mut terms: Vec<f64> = Vec::with_capacity(2 * n);
        let mut own_pos = 0.0;
        for k in 0..n {
            if mask.included(i, k, Polarity::Positive) {
                let z = dot(anchor, &normed[n + k]) / tau;
                if k == i {
                    own_pos = z;
                }
                z_max = z_max.max(z);
                terms.push(z);
            }
            if mask.included(i, k, Polarity::Negative) {
                let z = dot(anchor, &normed[2 * n + k]) / tau;
                z_max = z_max.max(z);
                terms.push(z);
            }
        }
        // lse = ln(1 + rest) with the max term split off exactly; ordering
        // (z_max - own) first keeps tiny losses from being swamped by z_max
        let max_at = terms
            .iter()
            .position(|&z| z == z_max)
            .expect("max term present");
        let rest: f64 = terms
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != max_at)
            .map(|(_, &z)| (z - z_max).exp())
            .sum();
        let loss = (z_max - own_pos) + rest.ln_1p();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { anchor: i });
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Batch loss with an injected embedding function (used by tests to check
/// scale invariance and by the trainer through [`batch_loss`]).
pub fn batch_loss_with<F>(
    embed_fn: F,
    batch: &[Triplet],
    mask: &MaskMatrix,
    tau: f64,
) -> Result<f64, TrainError>
where
    F: Fn(&str) -> Result<Vec<f64>, TrainError>,
{
    validate(batch, mask, tau)?;
    let texts = batch_texts(batch);
    let mut embeddings = Vec::with_capacity(texts.len());
    for (text, _) in &texts {
        embeddings.push(embed_fn(text)?);
    }
    let (normed, _) = normalize(embeddings, &texts)?;
    let losses = anchor_losses(&normed, mask, tau, batch.len())?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean masked InfoNCE loss of a batch under the given encoder parameters.
pub fn batch_loss(
    params: &EncoderParams,
    batch: &[Triplet],
    mask: &MaskMatrix,
    tau: f64,
) -> Result<f64, TrainError> {
    batch_loss_with(
        |text| {
            encoder::embed(params, text).map_err(|e| TrainError::Embed {
                sentence: text.to_string(),
                source: e,
            })
        },
        batch,
        mask,
        tau,
    )
}

/// Loss and its exact analytic gradient with respect to every parameter
/// entry (embedding table and projection).
pub fn loss_gradient(
    params: &EncoderParams,
    batch: &[Triplet],
    mask: &MaskMatrix,
    tau: f64,
) -> Result<(f64, ParamGrads), TrainError> {
    validate(batch, mask, tau)?;
    let n = batch.len();
    let d = params.dim;
    let texts = batch_texts(batch);

    // forward pass, keeping the pooled vectors for the projection gradient
    let mut bucket_lists = Vec::with_capacity(3 * n);
    let mut pooled_all = Vec::with_capacity(3 * n);
    let mut raw = Vec::with_capacity(3 * n);
    for (text, label) in &texts {
        let buckets = encoder::token_buckets(text, params.buckets);
        if buckets.is_empty() {
            return Err(TrainError::Embed {
                sentence: label.clone(),
                source: encoder::EmbedError::EmptyText,
            });
        }
        let mut pooled = vec![0.0; d];
        for &b in &buckets {
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
            *o = dot(&params.projection[j * d..(j + 1) * d], &pooled);
        }
        bucket_lists.push(buckets);
        pooled_all.push(pooled);
        raw.push(out);
    }
    let (normed, norms) = normalize(raw, &texts)?;

    // cosine/tau logits; masked entries stay at -inf and never contribute
    let neg_inf = f64::NEG_INFINITY;
    let mut z_pos = vec![neg_inf; n * n];
    let mut z_neg = vec![neg_inf; n * n];
    for i in 0..n {
        for k in 0..n {
            if mask.included(i, k, Polarity::Positive) {
                z_pos[i * n + k] = dot(&normed[i], &normed[n + k]) / tau;
            }
            if mask.included(i, k, Polarity::Negative) {
                z_neg[i * n + k] = dot(&normed[i], &normed[2 * n + k]) / tau;
            }
        }
    }

    let mut loss_sum = 0.0;
    // d(total loss)/d(z): softmax weights minus the indicator on (i, i, +)
    let mut coeff_pos = vec![0.0; n * n];
    let mut coeff_neg = vec![0.0; n * n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row_pos = &z_pos[i * n..(i + 1) * n];
        let row_neg = &z_neg[i * n..(i + 1) * n];
        let z_max = row_pos
            .iter()
            .chain(row_neg)
            .fold(neg_inf, |a, &b| a.max(b));
        let mut rest = 0.0;
        let mut max_seen = false;
        for &z in row_pos.iter().chain(row_neg) {
            if z > neg_inf {
                if !max_seen && z == z_max {
                    max_seen = true;
                } else {
                    rest += (z - z_max).exp();
                }
            }
        }
        let sum = 1.0 + rest;
        let own = z_pos[i * n + i];
        let loss_i = (z_max - own) + rest.ln_1p();
        if !loss_i.is_finite() {
            return Err(TrainError::NonFiniteLoss { anchor: i });
        }
        loss_sum += loss_i;
        for k in 0..n {
            if row_pos[k] > neg_inf {
                let w = (row_pos[k] - z_max).exp() / sum;
                coeff_pos[i * n + k] = (w - if k == i { 1.0 } else { 0.0 }) * inv_n;
            }
            if row_neg[k] > neg_inf {
                coeff_neg[i * n + k] = (row_neg[k] - z_max).exp() / sum * inv_n;
            }
        }
    }
    let loss = loss_sum * inv_n;

    // backprop through cosine onto the raw sentence embeddings
    let mut g_emb = vec![vec![0.0; d]; 3 * n];
    let mut add_pair = |a_idx: usize, b_idx: usize, cos: f64, coeff: f64| {
        if coeff == 0.0 {
            return;
        }
        let sa = coeff / (tau * norms[a_idx]);
        let sb = coeff / (tau * norms[b_idx]);
        for m in 0..d {
            let na = normed[a_idx][m];
            let nb = normed[b_idx][m];
            g_emb[a_idx][m] += sa * (nb - cos * na);
            g_emb[b_idx][m] += sb * (na - cos * nb);
        }
    };
    for i in 0..n {
        for k in 0..n {
            let zp = z_pos[i * n + k];
            if zp > neg_inf {
                add_pair(i, n + k, zp * tau, coeff_pos[i * n + k]);
            }
            let zn = z_neg[i * n + k];
            if zn > neg_inf {
                add_pair(i, 2 * n + k, zn * tau, coeff_neg[i * n + k]);
            }
        }
    }

    // backprop through projection and mean pooling
    let mut g_projection = vec![0.0; d * d];
    let mut g_embedding = vec![0.0; params.buckets * d];
    let mut du = vec![0.0; d];
    for s in 0..3 * n {
        let g = &g_emb[s];
        let pooled = &pooled_all[s];
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let row = &mut g_projection[j * d..(j + 1) * d];
            for (slot, &u) in row.iter_mut().zip(pooled) {
                *slot += gj * u;
            }
        }
        for m in du.iter_mut() {
            *m = 0.0;
        }
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let row = &params.projection[j * d..(j + 1) * d];
            for (slot, &w) in du.iter_mut().zip(row) {
                *slot += gj * w;
            }
        }
        let inv_len = 1.0 / bucket_lists[s].len() as f64;
        for &b in &bucket_lists[s] {
            let row = &mut g_embedding[b * d..(b + 1) * d];
            for (slot, &v) in row.iter_mut().zip(&du) {
                *slot += v * inv_len;
            }
        }
    }

    Ok((
        loss,
        ParamGrads {
            embedding: g_embedding,
            projection: g_projection,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GenerationMode, Sentence, TripletMeta};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

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

    fn fixed_embed(
        map: &HashMap<String, Vec<f64>>,
    ) -> impl Fn(&str) -> Result<Vec<f64>, TrainError> + '_ {
        move |text: &str| {
            map.get(text)
                .cloned()
                .ok_or_else(|| TrainError::Reference(format!("no vector for {text:?}")))
        }
    }

    #[test]
    fn symmetric_singleton_is_ln_two_for_any_tau() {
        let map: HashMap<String, Vec<f64>> = [
            ("x".to_string(), vec![1.0, 0.0]),
            ("p".to_string(), vec![0.0, 1.0]),
            ("n".to_string(), vec![0.0, 1.0]),
        ]
        .into();
        let batch = vec![triplet("t0", "x", "p", "n")];
        for tau in [0.05, 0.5, 1.0, 3.0] {
            let loss =
                batch_loss_with(fixed_embed(&map), &batch, &MaskMatrix::all_ones(1), tau).unwrap();
            assert!(
                (loss - std::f64::consts::LN_2).abs() <= 1e-12,
                "tau={tau}: {loss}"
            );
        }
    }

    #[test]
    fn singleton_with_sim_gap_matches_scalar_oracle() {
        // sim(h, h+) = 0.8, sim(h, h-) ~= 0.2, tau = 0.05
        let map: HashMap<String, Vec<f64>> = [
            ("x".to_string(), vec![1.0, 0.0]),
            ("p".to_string(), vec![0.8, 0.6]),
            ("n".to_string(), vec![0.2, (1.0f64 - 0.04).sqrt()]),
        ]
        .into();
        let batch = vec![triplet("t0", "x", "p", "n")];
        let tau = 0.05;
        let loss =
            batch_loss_with(fixed_embed(&map), &batch, &MaskMatrix::all_ones(1), tau).unwrap();
        // independent scalar route: loss = ln(1 + exp((cos_n - cos_p)/tau))
        let cos_p = crate::encoder::cosine_sim(&map["x"], &map["p"]).unwrap();
        let cos_n = crate::encoder::cosine_sim(&map["x"], &map["n"]).unwrap();
        let oracle = ((cos_n - cos_p) / tau).exp().ln_1p();
        assert!(
            (loss - oracle).abs() / oracle <= 1e-12,
            "{loss} vs {oracle}"
        );
        assert!((loss - 6.1442e-6).abs() / 6.1442e-6 < 1e-3);
    }

    #[test]
    fn fully_cross_masked_pair_reduces_to_singleton_mean() {
        let map: HashMap<String, Vec<f64>> = [
            ("x0".to_string(), vec![1.0, 0.0, 0.0]),
            ("p0".to_string(), vec![0.9, 0.1, 0.2]),
            ("n0".to_string(), vec![0.1, 0.9, 0.0]),
            ("x1".to_string(), vec![0.0, 1.0, 0.4]),
            ("p1".to_string(), vec![0.2, 0.8, 0.1]),
            ("n1".to_string(), vec![0.5, 0.5, 0.9]),
        ]
        .into();
        let pair = vec![
            triplet("t0", "x0", "p0", "n0"),
            triplet("t1", "x1", "p1", "n1"),
        ];
        let mut mask = MaskMatrix::all_ones(2);
        for (i, k) in [(0usize, 1usize), (1, 0)] {
            mask.set(i, k, Polarity::Positive, false);
            mask.set(i, k, Polarity::Negative, false);
        }
        let tau = 0.05;
        let both = batch_loss_with(fixed_embed(&map), &pair, &mask, tau).unwrap();
        let first =
            batch_loss_with(fixed_embed(&map), &pair[..1], &MaskMatrix::all_ones(1), tau).unwrap();
        let second =
            batch_loss_with(fixed_embed(&map), &pair[1..], &MaskMatrix::all_ones(1), tau).unwrap();
        assert!((both - (first + second) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn loss_is_invariant_under_embedding_rescaling() {
        let map: HashMap<String, Vec<f64>> = [
            ("x0".to_string(), vec![1.0, 0.2, 0.0]),
            ("p0".to_string(), vec![0.9, 0.1, 0.2]),
            ("n0".to_string(), vec![0.1, 0.9, 0.0]),
            ("x1".to_string(), vec![0.0, 1.0, 0.4]),
            ("p1".to_string(), vec![0.2, 0.8, 0.1]),
            ("n1".to_string(), vec![0.5, 0.5, 0.9]),
        ]
        .into();
        let batch = vec![
            triplet("t0", "x0", "p0", "n0"),
            triplet("t1", "x1", "p1", "n1"),
        ];
        let mask = MaskMatrix::all_ones(2);
        let base = batch_loss_with(fixed_embed(&map), &batch, &mask, 0.05).unwrap();
        let scaled = batch_loss_with(
            |t| fixed_embed(&map)(t).map(|v| v.iter().map(|x| x * 17.0).collect()),
            &batch,
            &mask,
            0.05,
        )
        .unwrap();
        assert!((base - scaled).abs() <= 1e-12);
    }

    #[test]
    fn diagonal_masked_mask_is_rejected() {
        let params = EncoderParams::init(64, 8, 1);
        let batch = vec![triplet("t0", "alpha beta", "beta gamma", "delta")];
        let mut mask = MaskMatrix::all_ones(1);
        mask.set(0, 0, Polarity::Negative, false);
        assert!(matches!(
            batch_loss(&params, &batch, &mask, 0.05),
            Err(TrainError::InvalidMask(_))
        ));
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Triplet> {
        let mut word = |tag: &str, i: usize| -> String {
            let extra: u32 = rng.random_range(0..1000);
            format!("{tag}{i}w{extra}")
        };
        (0..n)
            .map(|i| {
                let premise = format!("{} {}", word("x", i), word("x", i));
                let pos = format!("{} {} {}", word("p", i), word("p", i), word("p", i));
                let neg = format!("{} {}", word("n", i), word("n", i));
                triplet(&format!("t{i}"), &premise, &pos, &neg)
            })
            .collect()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> MaskMatrix {
        let mut mask = MaskMatrix::all_ones(n);
        for i in 0..n {
            for k in 0..n {
                if k != i {
                    if rng.random::<f64>() < 0.25 {
                        mask.set(i, k, Polarity::Positive, false);
                    }
                    if rng.random::<f64>() < 0.25 {
                        mask.set(i, k, Polarity::Negative, false);
                    }
                }
            }
        }
        mask
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..12 {
            let n = rng.random_range(1..=4);
            let batch = random_batch(&mut rng, n);
            let mask = random_mask(&mut rng, n);
            let tau = [0.05, 0.1, 0.7][trial % 3];
            let params = EncoderParams::init(64, 6, 1000 + trial as u64);
            let (_, grads) = loss_gradient(&params, &batch, &mask, tau).unwrap();
            let step = 1e-5;
            for _ in 0..20 {
                let on_projection = rng.random::<f64>() < 0.5;
                let (idx, analytic) = if on_projection {
                    let idx = rng.random_range(0..params.projection.len());
                    (idx, grads.projection[idx])
                } else {
                    // restrict to buckets the batch actually touches
                    let touched: Vec<usize> = batch
                        .iter()
                        .flat_map(|t| {
                            [
                                t.premise.text.as_str(),
                                t.entailment.as_str(),
                                t.contradiction.as_str(),
                            ]
                        })
                        .flat_map(|s| encoder::token_buckets(s, params.buckets))
                        .collect();
                    let b = touched[rng.random_range(0..touched.len())];
                    let idx = b * params.dim + rng.random_range(0..params.dim);
                    (idx, grads.embedding[idx])
                };
                let mut plus = params.clone();
                let mut minus = params.clone();
                if on_projection {
                    plus.projection[idx] += step;
                    minus.projection[idx] -= step;
                } else {
                    plus.embedding[idx] += step;
                    minus.embedding[idx] -= step;
                }
                let lp = batch_loss(&plus, &batch, &mask, tau).unwrap();
                let lm = batch_loss(&minus, &batch, &mask, tau).unwrap();
                let numeric = (lp - lm) / (2.0 * step);
                let diff = (analytic - numeric).abs();
                let rel = diff / analytic.abs().max(numeric.abs()).max(1e-12);
                // below ~1e-9 absolute the central difference is roundoff
                assert!(
                    rel <= 1e-4 || diff <= 1e-9,
                    "trial {trial}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn radial_directional_derivative_is_zero() {
        // scaling one sentence's embedding output leaves every cosine fixed,
        // so the derivative of the loss along that radial direction vanishes
        let map: HashMap<String, Vec<f64>> = [
            ("x0".to_string(), vec![1.0, 0.2, 0.0]),
            ("p0".to_string(), vec![0.9, 0.1, 0.2]),
            ("n0".to_string(), vec![0.1, 0.9, 0.0]),
        ]
        .into();
        let batch = vec![triplet("t0", "x0", "p0", "n0")];
        let mask = MaskMatrix::all_ones(1);
        let tau = 0.05;
        let h = 1e-6;
        for target in ["x0", "p0", "n0"] {
            let scaled = |factor: f64| {
                batch_loss_with(
                    |t| {
                        let v = map.get(t).cloned().unwrap();
                        if t == target {
                            Ok(v.iter().map(|x| x * factor).collect())
                        } else {
                            Ok(v)
                        }
                    },
                    &batch,
                    &mask,
                    tau,
                )
                .unwrap()
            };
            let derivative = (scaled(1.0 + h) - scaled(1.0 - h)) / (2.0 * h);
            assert!(derivative.abs() <= 1e-9, "{target}: {derivative}");
        }
    }

    #[test]
    fn permuting_the_batch_preserves_the_mean_loss() {
        let params = EncoderParams::init(256, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(&mut rng, 5);
        let mask = MaskMatrix::all_ones(5);
        let base = batch_loss(&params, &batch, &mask, 0.05).unwrap();
        let mut permuted = batch.clone();
        permuted.rotate_left(2);
        let rotated = batch_loss(&params, &permuted, &mask, 0.05).unwrap();
        assert!((base - rotated).abs() <= 1e-12);
    }

    #[test]
    fn loss_is_strictly_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = rng.random_range(1..=5);
            let batch = random_batch(&mut rng, n);
            let mask = random_mask(&mut rng, n);
            let params = EncoderParams::init(128, 8, trial);
            let loss = batch_loss(&params, &batch, &mask, 0.05).unwrap();
            assert!(loss > 0.0, "loss {loss} not positive");
        }
    }
}
