//! Pipeline configuration: one JSON document; command-line flags override
//! individual fields, and the effective merged config is echoed next to the
//! stage artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use multicsr_core::backend::{BackendConfig, BackendKind};
use multicsr_core::corpus::CurationPolicy;
use multicsr_core::generate::{DemoConfig, GenerationConfig};
use multicsr_core::train::TrainConfig;

use crate::stages::StageError;

/// Where a fixed reference embedder comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceConfig {
    /// JSONL rows `{"text":…,"vector":[…]}`.
    Vectors { path: PathBuf },
    /// A previously trained encoder checkpoint.
    Checkpoint { path: PathBuf },
    /// OpenAI-compatible `/v1/embeddings` endpoint.
    Remote { endpoint: String, model: String },
    /// Fixed random hash encoder (no external model needed).
    Hash {
        seed: u64,
        buckets: usize,
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Stage-0 input premises.
    pub premises: PathBuf,
    /// Directory for every stage artifact.
    pub work_dir: PathBuf,
    /// Dev STS file for model selection during training.
    pub dev_sts: PathBuf,
    /// Test STS file for the eval stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_sts: Option<PathBuf>,
    /// Optional query/target TSV for retrieval-accuracy evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_pairs: Option<PathBuf>,
    /// Optional triplets file providing the demonstration pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_pool: Option<PathBuf>,
    /// Optional supervised triplets mixed into the training corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervised: Option<PathBuf>,
}

impl Paths {
    pub fn triplets(&self) -> PathBuf {
        self.work_dir.join("triplets.jsonl")
    }
    pub fn skipped(&self) -> PathBuf {
        self.work_dir.join("skipped.jsonl")
    }
    pub fn scored(&self) -> PathBuf {
        self.work_dir.join("scored.jsonl")
    }
    pub fn score_skipped(&self) -> PathBuf {
        self.work_dir.join("score_skipped.jsonl")
    }
    pub fn score_report(&self) -> PathBuf {
        self.work_dir.join("score_report.json")
    }
    pub fn curated(&self) -> PathBuf {
        self.work_dir.join("curated.jsonl")
    }
    pub fn curation_report(&self) -> PathBuf {
        self.work_dir.join("curation_report.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.work_dir.join("checkpoint.json")
    }
    pub fn history(&self) -> PathBuf {
        self.work_dir.join("history.jsonl")
    }
    pub fn eval(&self) -> PathBuf {
        self.work_dir.join("eval.json")
    }
    pub fn policy_sweep(&self) -> PathBuf {
        self.work_dir.join("policy_sweep.json")
    }
    pub fn omega_sweep(&self) -> PathBuf {
        self.work_dir.join("omega_sweep.json")
    }
    pub fn sigma_sweep(&self) -> PathBuf {
        self.work_dir.join("sigma_sweep.json")
    }
    pub fn effective_config(&self) -> PathBuf {
        self.work_dir.join("effective_config.json")
    }
}

fn default_workers() -> usize {
    1
}
fn default_max_retries() -> u32 {
    2
}

/// Sweep grids; every field has an Appendix-default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policies: Option<Vec<CurationPolicy>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omegas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
}

impl SweepConfig {
    /// The fully specified (alpha, beta, gamma) rows of the curation-policy
    /// study.
    pub fn default_policies() -> Vec<CurationPolicy> {
        let rows = [
            (4.0, 4.0, 1.0),
            (4.0, 4.0, 2.0),
            (4.0, 4.0, 3.0),
            (4.0, 4.0, 4.0),
            (3.0, 3.0, 1.0),
            (3.0, 3.0, 2.0),
            (3.0, 3.0, 3.0),
            (3.0, 1.0, 3.0),
            (2.0, 1.0, 2.0),
            (2.0, 2.0, 1.0),
            (2.0, 2.0, 2.0),
            (1.0, 1.0, 1.0),
        ];
        rows.iter()
            .map(|&(alpha, beta, gamma)| CurationPolicy { alpha, beta, gamma })
            .collect()
    }

    pub fn default_omegas() -> Vec<f64> {
        vec![-0.1, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    }

    pub fn default_sigmas() -> Vec<f64> {
        vec![0.75, 0.8, 0.85, 0.9, 0.95]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default = "CurationPolicy::default_paper")]
    pub policy: CurationPolicy,
    #[serde(default)]
    pub train: TrainConfig,
    pub paths: Paths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo: Option<DemoConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Pipe generated triplets straight into scoring during the generate
    /// stage.
    #[serde(default)]
    pub fused: bool,
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub direct: bool,
    pub fused: bool,
    pub omega: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub sigma: Option<f64>,
    pub tau: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<u32>,
    pub lr: Option<f64>,
    pub demos: Option<usize>,
    pub demo_lambda: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            StageError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| StageError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(workers) = o.workers {
            self.workers = workers;
        }
        if let Some(seed) = o.seed {
            self.generation.seed = seed;
            self.train.seed = seed;
        }
        if o.direct {
            self.generation.mode = multicsr_core::corpus::GenerationMode::Direct;
        }
        if o.fused {
            self.fused = true;
        }
        if let Some(v) = o.omega {
            self.generation.omega = v;
        }
        if let Some(v) = o.alpha {
            self.policy.alpha = v;
        }
        if let Some(v) = o.beta {
            self.policy.beta = v;
        }
        if let Some(v) = o.gamma {
            self.policy.gamma = v;
        }
        if let Some(v) = o.sigma {
            self.train.sigma = v;
        }
        if let Some(v) = o.tau {
            self.train.tau = v;
        }
        if let Some(v) = o.batch {
            self.train.batch_size = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if o.demos.is_some() || o.demo_lambda.is_some() {
            let demo = self.demo.get_or_insert(DemoConfig {
                count: 3,
                lambda: 0.6,
            });
            if let Some(count) = o.demos {
                demo.count = count;
            }
            if let Some(lambda) = o.demo_lambda {
                demo.lambda = lambda;
            }
        }
    }

    /// Static validation: field ranges plus existence of user-supplied input
    /// files (stage-produced intermediates are checked per stage instead).
    pub fn validate(&self) -> Result<(), StageError> {
        self.backend
            .validate()
            .map_err(|e| StageError::Config(e.to_string()))?;
        self.generation
            .validate()
            .map_err(|e| StageError::Config(e.to_string()))?;
        self.policy.validate().map_err(StageError::Config)?;
        self.train
            .validate()
            .map_err(|e| StageError::Config(e.to_string()))?;
        if let Some(demo) = &self.demo {
            demo.validate()
                .map_err(|e| StageError::Config(e.to_string()))?;
        }
        if self.workers == 0 {
            return Err(StageError::Config("workers must be >= 1".into()));
        }
        let mut required: Vec<(&str, &PathBuf)> = vec![
            ("paths.premises", &self.paths.premises),
            ("paths.dev_sts", &self.paths.dev_sts),
        ];
        if let Some(p) = &self.paths.test_sts {
            required.push(("paths.test_sts", p));
        }
        if let Some(p) = &self.paths.retrieval_pairs {
            required.push(("paths.retrieval_pairs", p));
        }
        if let Some(p) = &self.paths.demo_pool {
            required.push(("paths.demo_pool", p));
        }
        if let Some(p) = &self.paths.supervised {
            required.push(("paths.supervised", p));
        }
        if self.backend.kind == BackendKind::Fixture {
            if let Some(p) = &self.backend.fixture_path {
                if !p.exists() {
                    return Err(StageError::Config(format!(
                        "backend.fixture_path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        match &self.reference {
            Some(ReferenceConfig::Vectors { path })
            | Some(ReferenceConfig::Checkpoint { path })
                if !path.exists() =>
            {
                return Err(StageError::Config(format!(
                    "reference path {} does not exist",
                    path.display()
                )));
            }
            _ => {}
        }
        for (name, path) in required {
            if !path.exists() {
                return Err(StageError::Config(format!(
                    "{name} {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}
