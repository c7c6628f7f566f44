//! Domain types for sentences, triplets, scores, and curation policies, plus
//! JSONL persistence for every pipeline stage.
//!
//! Every stage file is newline-delimited JSON with an explicit
//! `"schema_version": 1` field. Unknown fields are preserved on rewrite, so
//! `write ∘ read ∘ write` is byte-identical for any valid input file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Version written into (and required of) every stage record.
pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path}:{line}: schema violation: {reason}")]
    SchemaViolation {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("record {id:?}: invariant violation: {reason}")]
    InvariantViolation { id: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A premise sentence, the unit of the stage-0 corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub schema_version: u64,
    pub id: String,
    pub text: String,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            text: text.into(),
            extra: BTreeMap::new(),
        }
    }
}

/// How a hypothesis pair was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    /// Greedy decoding over `l - omega * l_hat`.
    Contrastive,
    /// Plain generation under the original instruction only (logit-less
    /// backends).
    Direct,
}

/// Provenance of a generated triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub backend: String,
    /// Id of the entailment instruction used for this premise.
    pub entail_prompt: String,
    /// Id of the contradiction instruction used for this premise.
    pub contra_prompt: String,
    /// Smoothing coefficient; absent in direct mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    pub mode: GenerationMode,
}

/// A premise with its generated entailment and contradiction hypotheses.
///
/// The triplet id is the premise id, which keeps every downstream record
/// traceable to its stage-0 input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TripletRecord", try_from = "TripletRecord")]
pub struct Triplet {
    pub id: String,
    pub premise: Sentence,
    pub entailment: String,
    pub contradiction: String,
    pub meta: TripletMeta,
    extra: BTreeMap<String, Value>,
}

impl Triplet {
    pub fn new(
        premise: Sentence,
        entailment: impl Into<String>,
        contradiction: impl Into<String>,
        meta: TripletMeta,
    ) -> Self {
        Self {
            id: premise.id.clone(),
            premise,
            entailment: entailment.into(),
            contradiction: contradiction.into(),
            meta,
            extra: BTreeMap::new(),
        }
    }
}

/// Wire form of [`Triplet`]: the premise is stored as bare text under the
/// shared id.
#[derive(Serialize, Deserialize)]
struct TripletRecord {
    schema_version: u64,
    id: String,
    premise: String,
    entailment: String,
    contradiction: String,
    meta: TripletMeta,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

impl From<Triplet> for TripletRecord {
    fn from(t: Triplet) -> Self {
        TripletRecord {
            schema_version: SCHEMA_VERSION,
            id: t.id,
            premise: t.premise.text,
            entailment: t.entailment,
            contradiction: t.contradiction,
            meta: t.meta,
            extra: t.extra,
        }
    }
}

impl TryFrom<TripletRecord> for Triplet {
    type Error = String;

    fn try_from(r: TripletRecord) -> Result<Self, String> {
        if r.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                r.schema_version
            ));
        }
        Ok(Triplet {
            premise: Sentence::new(r.id.clone(), r.premise),
            id: r.id,
            entailment: r.entailment,
            contradiction: r.contradiction,
            meta: r.meta,
            extra: r.extra,
        })
    }
}

/// A triplet plus the LLM similarity scores `a` for (premise, entailment)
/// and `b` for (premise, contradiction), both in `[0, 5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    #[serde(flatten)]
    pub triplet: Triplet,
    pub a: f64,
    pub b: f64,
}

/// Thresholds of the curation predicate: keep a triplet iff
/// `a >= alpha && b <= beta && a >= b + gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurationPolicy {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl CurationPolicy {
    /// Paper defaults: alpha = 3, beta = 3, gamma = 1.
    pub fn default_paper() -> Self {
        Self {
            alpha: 3.0,
            beta: 3.0,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=5.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 5]"));
            }
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(format!("gamma = {} must be >= 0", self.gamma));
        }
        Ok(())
    }
}

/// One evaluation pair from an STS file (dataset-native gold scale).
#[derive(Debug, Clone, PartialEq)]
pub struct StsExample {
    pub sent1: String,
    pub sent2: String,
    pub gold: f64,
}

/// A record that can live in a JSONL stage file.
pub trait CorpusRecord: Serialize + DeserializeOwned {
    fn record_id(&self) -> &str;
    /// Type-level invariants; the reason string ends up in the error.
    fn check(&self) -> Result<(), String>;
}

impl CorpusRecord for Sentence {
    fn record_id(&self) -> &str {
        &self.id
    }

    fn check(&self) -> Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        Ok(())
    }
}

impl CorpusRecord for Triplet {
    fn record_id(&self) -> &str {
        &self.id
    }

    fn check(&self) -> Result<(), String> {
        if self.entailment.trim().is_empty() {
            return Err("entailment is empty".into());
        }
        if self.contradiction.trim().is_empty() {
            return Err("contradiction is empty".into());
        }
        if self.meta.mode == GenerationMode::Direct && self.meta.omega.is_some() {
            return Err("direct mode must not carry omega".into());
        }
        Ok(())
    }
}

impl CorpusRecord for ScoredTriplet {
    fn record_id(&self) -> &str {
        &self.triplet.id
    }

    fn check(&self) -> Result<(), String> {
        self.triplet.check()?;
        for (name, v) in [("a", self.a), ("b", self.b)] {
            if !v.is_finite() || !(0.0..=5.0).contains(&v) {
                return Err(format!("score {name} = {v} outside [0, 5]"));
            }
        }
        Ok(())
    }
}

/// Read one stage file, in file order. Malformed lines are reported with
/// their 1-based line number; ids must be unique within the file.
pub fn read_jsonl<T: CorpusRecord>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            CorpusError::FileNotFound(path.to_path_buf())
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::SchemaViolation {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        record
            .check()
            .map_err(|reason| CorpusError::SchemaViolation {
                path: path.to_path_buf(),
                line: line_no,
                reason,
            })?;
        if !seen.insert(record.record_id().to_string()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: record.record_id().to_string(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Write a stage file as newline-delimited JSON, atomically
/// (write to a temporary sibling, then rename).
pub fn write_jsonl<T: CorpusRecord>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for record in records {
        record
            .check()
            .map_err(|reason| CorpusError::InvariantViolation {
                id: record.record_id().to_string(),
                reason,
            })?;
        if !seen.insert(record.record_id().to_string()) {
            return Err(CorpusError::InvariantViolation {
                id: record.record_id().to_string(),
                reason: "duplicate id within one file".into(),
            });
        }
    }
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).expect("serialization cannot fail");
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

/// Write bytes to `path` via a temporary sibling file and rename, so an
/// interrupted writer never leaves a truncated file at the final path.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Read a tab-separated STS file: `sent1<TAB>sent2<TAB>gold`, one pair per
/// line.
pub fn read_sts(path: &Path) -> Result<Vec<StsExample>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            CorpusError::FileNotFound(path.to_path_buf())
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let violation = |reason: String| CorpusError::SchemaViolation {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(violation(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let gold: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| violation(format!("gold score: {e}")))?;
        if !gold.is_finite() {
            return Err(violation(format!("gold score {gold} is not finite")));
        }
        if fields[0].trim().is_empty() || fields[1].trim().is_empty() {
            return Err(violation("empty sentence".into()));
        }
        examples.push(StsExample {
            sent1: fields[0].to_string(),
            sent2: fields[1].to_string(),
            gold,
        });
    }
    Ok(examples)
}

/// Write an STS file in the same tab-separated layout `read_sts` expects.
pub fn write_sts(examples: &[StsExample], path: &Path) -> Result<(), CorpusError> {
    let mut buf = String::new();
    for ex in examples {
        if ex.sent1.contains('\t') || ex.sent2.contains('\t') {
            return Err(CorpusError::InvariantViolation {
                id: ex.sent1.clone(),
                reason: "sentence contains a tab".into(),
            });
        }
        buf.push_str(&format!("{}\t{}\t{}\n", ex.sent1, ex.sent2, ex.gold));
    }
    atomic_write(path, buf.as_bytes())
}
