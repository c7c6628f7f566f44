//! Optimizer loop for the toy encoder: seeded-shuffle epochs, per-batch mask
//! construction, Adam steps on the analytic gradient, and best-checkpoint
//! selection by dev Spearman.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{StsExample, Triplet};
use crate::encoder::{EmbedError, EncoderParams};
use crate::eval::{self, EvalError};
use crate::loss::{loss_gradient, ParamGrads};
use crate::mask::{build_mask, MaskMatrix, ReferenceEmbed};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sentence {sentence:?}: {source}")]
    Embed {
        sentence: String,
        #[source]
        source: EmbedError,
    },
    #[error("degenerate vector for sentence {sentence:?}")]
    DegenerateVector { sentence: String },
    #[error("non-finite loss at anchor {anchor}")]
    NonFiniteLoss { anchor: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("reference embedder: {0}")]
    Reference(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("at step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error("dev evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn default_tau() -> f64 {
    0.05
}
fn default_sigma() -> f64 {
    0.9
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    0.01
}
fn default_epochs() -> u32 {
    10
}
fn default_mask_enabled() -> bool {
    true
}
fn default_buckets() -> usize {
    4096
}
fn default_dim() -> usize {
    32
}

/// Training hyperparameters. The optimizer is Adam with beta1 = 0.9,
/// beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// InfoNCE temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Mask indicator threshold.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mask_enabled")]
    pub mask_enabled: bool,
    /// Hash-embedding table rows (V).
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    /// Embedding dimension (d).
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "tau = {} must be > 0",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(TrainError::InvalidConfig(format!(
                "sigma = {} outside [0, 1]",
                self.sigma
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "lr = {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.buckets == 0 || self.dim == 0 {
            return Err(TrainError::InvalidConfig(
                "buckets and dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m_embedding: Vec<f64>,
    v_embedding: Vec<f64>,
    m_projection: Vec<f64>,
    v_projection: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(params: &EncoderParams) -> Self {
        Self {
            m_embedding: vec![0.0; params.embedding.len()],
            v_embedding: vec![0.0; params.embedding.len()],
            m_projection: vec![0.0; params.projection.len()],
            v_projection: vec![0.0; params.projection.len()],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        };
        update(
            &mut params.embedding,
            &grads.embedding,
            &mut self.m_embedding,
            &mut self.v_embedding,
        );
        update(
            &mut params.projection,
            &grads.projection,
            &mut self.m_projection,
            &mut self.v_projection,
        );
    }
}

/// One row of history.jsonl: either a per-step loss or a per-epoch dev
/// score. Epoch 0 is the untrained baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HistoryEvent {
    Step { step: u64, loss: f64 },
    Epoch { epoch: u32, dev_spearman: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev Spearman.
    pub params: EncoderParams,
    pub history: Vec<HistoryEvent>,
    pub best_epoch: u32,
    pub best_dev_spearman: f64,
}

// decouple the shuffle and sampling streams from the init stream
const SHUFFLE_SALT: u64 = 0x53_48_55_46_46_4c_45;
const DUP_SALT: u64 = 0x44_55_50;

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Fit the encoder on a curated corpus.
///
/// Per §-defaults the mask is built fresh for every batch; when no reference
/// embedder is supplied, training falls back to the unmasked objective. The
/// returned parameters are those of the epoch with the best dev Spearman
/// (epoch 0 counts as the untrained baseline). Identical seeds and config
/// reproduce bitwise-identical parameters.
pub fn train(
    corpus: &[Triplet],
    config: &TrainConfig,
    reference: Option<&dyn ReferenceEmbed>,
    dev: &[StsExample],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if dev.is_empty() {
        return Err(TrainError::InvalidConfig("dev set is empty".into()));
    }
    let mask_on = config.mask_enabled && reference.is_some();

    let mut params = EncoderParams::init(config.buckets, config.dim, config.seed);
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ SHUFFLE_SALT));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::new();

    let dev_score = |params: &EncoderParams| -> Result<f64, TrainError> {
        Ok(eval::eval_sts(params, dev)?.value)
    };

    let mut best_score = dev_score(&params)?;
    let mut best_params = params.clone();
    let mut best_epoch = 0u32;
    history.push(HistoryEvent::Epoch {
        epoch: 0,
        dev_spearman: best_score,
    });

    let mut step: u64 = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Triplet> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mask = if mask_on {
                build_mask(
                    reference.expect("mask_on implies reference"),
                    &batch,
                    config.sigma,
                )
                .map_err(|e| TrainError::AtStep {
                    step,
                    source: Box::new(e),
                })?
            } else {
                MaskMatrix::all_ones(batch.len())
            };
            let (loss, grads) = loss_gradient(&params, &batch, &mask, config.tau).map_err(|e| {
                TrainError::AtStep {
                    step,
                    source: Box::new(e),
                }
            })?;
            adam.step(&mut params, &grads, config.lr);
            history.push(HistoryEvent::Step { step, loss });
            step += 1;
        }
        let score = dev_score(&params)?;
        history.push(HistoryEvent::Epoch {
            epoch,
            dev_spearman: score,
        });
        if score > best_score {
            best_score = score;
            best_params = params.clone();
            best_epoch = epoch;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_dev_spearman: best_score,
    })
}

/// One row of the duplication stress table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DupStressRow {
    pub dup_count: usize,
    pub masked_dev_spearman: f64,
    pub unmasked_dev_spearman: f64,
}

/// Index of the triplet that `duplication_stress` will duplicate for a
/// given corpus length and seed. Exposed so dev-set instruments can probe
/// the duplicated pair's neighborhood.
pub fn duplication_target(corpus_len: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ DUP_SALT));
    rng.random_range(0..corpus_len)
}

/// Duplicate one sampled triplet `dup_count` times, mix it in, and train
/// with and without the mask under identical seeds.
pub fn duplication_stress(
    corpus: &[Triplet],
    dup_counts: &[usize],
    config: &TrainConfig,
    reference: &dyn ReferenceEmbed,
    dev: &[StsExample],
) -> Result<Vec<DupStressRow>, TrainError> {
    if corpus.len() < 2 {
        return Err(TrainError::InvalidConfig(
            "duplication stress needs at least 2 triplets".into(),
        ));
    }
    let target = duplication_target(corpus.len(), config.seed);
    let mut rows = Vec::with_capacity(dup_counts.len());
    for &dup_count in dup_counts {
        let mut extended = corpus.to_vec();
        extended.extend(std::iter::repeat_n(corpus[target].clone(), dup_count));
        let masked_config = TrainConfig {
            mask_enabled: true,
            ..config.clone()
        };
        let unmasked_config = TrainConfig {
            mask_enabled: false,
            ..config.clone()
        };
        let masked = train(&extended, &masked_config, Some(reference), dev)?;
        let unmasked = train(&extended, &unmasked_config, None, dev)?;
        rows.push(DupStressRow {
            dup_count,
            masked_dev_spearman: masked.best_dev_spearman,
            unmasked_dev_spearman: unmasked.best_dev_spearman,
        });
    }
    Ok(rows)
}

/// Checkpoint layout: schema version, dimensions, both matrices as 64-bit
/// floats, and the config that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u64,
    pub buckets: usize,
    pub dim: usize,
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
    pub config: TrainConfig,
}

pub fn save_checkpoint(
    path: &Path,
    params: &EncoderParams,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let checkpoint = Checkpoint {
        schema_version: crate::corpus::SCHEMA_VERSION,
        buckets: params.buckets,
        dim: params.dim,
        embedding: params.embedding.clone(),
        projection: params.projection.clone(),
        config: config.clone(),
    };
    let json = serde_json::to_string(&checkpoint).expect("checkpoint serializes");
    crate::corpus::atomic_write(path, json.as_bytes())
        .map_err(|e| TrainError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, TrainConfig), TrainError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if checkpoint.schema_version != crate::corpus::SCHEMA_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported schema_version {}",
            checkpoint.schema_version
        )));
    }
    let params = EncoderParams {
        buckets: checkpoint.buckets,
        dim: checkpoint.dim,
        embedding: checkpoint.embedding,
        projection: checkpoint.projection,
    };
    params.check().map_err(TrainError::Checkpoint)?;
    Ok((params, checkpoint.config))
}

/// Write history.jsonl.
pub fn write_history(path: &Path, history: &[HistoryEvent]) -> Result<(), TrainError> {
    let mut buf = String::new();
    for event in history {
        buf.push_str(&serde_json::to_string(event).expect("history serializes"));
        buf.push('\n');
    }
    crate::corpus::atomic_write(path, buf.as_bytes())
        .map_err(|e| TrainError::Checkpoint(e.to_string()))
}
