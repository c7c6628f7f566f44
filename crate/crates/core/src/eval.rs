//! Spearman-correlation STS evaluation and the low-resource
//! nearest-neighbor retrieval accuracy metric.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StsExample;
use crate::encoder::{self, EmbedError, EncoderParams, NORM_EPS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("example {index}: {source}")]
    Embed {
        index: usize,
        #[source]
        source: EmbedError,
    },
    #[error("retrieval needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("duplicate target sentence {0:?}")]
    DuplicateTarget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "spearman")]
    Spearman,
    #[serde(rename = "retrieval-accuracy")]
    RetrievalAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
}

/// Average (fractional) ranks, 1-based; tied values share the mean of the
/// ranks they span.
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mean_rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rank correlation: the Pearson correlation of fractional
/// ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::DegenerateInput(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(EvalError::DegenerateInput(format!(
            "need at least 2 observations, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(EvalError::DegenerateInput("non-finite value".into()));
    }
    for (name, series) in [("xs", xs), ("ys", ys)] {
        if series.iter().all(|&v| v == series[0]) {
            return Err(EvalError::DegenerateInput(format!("{name} is constant")));
        }
    }
    let rx = fractional_ranks(xs);
    let ry = fractional_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation between predicted pair cosines and gold scores.
pub fn eval_sts(params: &EncoderParams, examples: &[StsExample]) -> Result<EvalResult, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::DegenerateInput("no examples".into()));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let u = encoder::embed(params, &ex.sent1)
            .map_err(|source| EvalError::Embed { index, source })?;
        let v = encoder::embed(params, &ex.sent2)
            .map_err(|source| EvalError::Embed { index, source })?;
        let cos =
            encoder::cosine_sim(&u, &v).map_err(|source| EvalError::Embed { index, source })?;
        predictions.push(cos);
        golds.push(ex.gold);
    }
    Ok(EvalResult {
        metric: Metric::Spearman,
        value: spearman(&predictions, &golds)?,
        n: examples.len(),
    })
}

/// Fraction of queries whose nearest target (cosine over all targets) is
/// their own paired target; nearest ties break to the lowest index.
pub fn eval_retrieval_accuracy(
    params: &EncoderParams,
    pairs: &[(String, String)],
) -> Result<EvalResult, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let mut seen = std::collections::HashSet::new();
    for (_, target) in pairs {
        if !seen.insert(target.as_str()) {
            return Err(EvalError::DuplicateTarget(target.clone()));
        }
    }
    let normalized = |text: &str, index: usize| -> Result<Vec<f64>, EvalError> {
        let v =
            encoder::embed(params, text).map_err(|source| EvalError::Embed { index, source })?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(EvalError::Embed {
                index,
                source: EmbedError::DegenerateVector,
            });
        }
        Ok(v.iter().map(|x| x / norm).collect())
    };
    let queries: Vec<Vec<f64>> = pairs
        .iter()
        .enumerate()
        .map(|(i, (q, _))| normalized(q, i))
        .collect::<Result<_, _>>()?;
    let targets: Vec<Vec<f64>> = pairs
        .iter()
        .enumerate()
        .map(|(i, (_, t))| normalized(t, i))
        .collect::<Result<_, _>>()?;
    let mut correct = 0usize;
    for (i, q) in queries.iter().enumerate() {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, t) in targets.iter().enumerate() {
            let sim: f64 = q.iter().zip(t).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        if best == i {
            correct += 1;
        }
    }
    Ok(EvalResult {
        metric: Metric::RetrievalAccuracy,
        value: correct as f64 / pairs.len() as f64,
        n: pairs.len(),
    })
}
