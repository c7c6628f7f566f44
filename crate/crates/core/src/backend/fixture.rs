//! Deterministic table-backed language model for exact decode oracles.
//!
//! The table file is JSONL. The first line declares the vocabulary and the
//! end-of-sequence token id:
//!
//! ```text
//! {"vocab":["</s>","a","b"],"eos":0}
//! {"instruction":"ent-1","context":[],"logits":[0.0,2.0,1.0]}
//! {"instruction":"ent-1","context":[1],"logits":[3.0,0.0,1.0]}
//! ```
//!
//! A row matches a lookup when its `context` equals the tail of the current
//! prefix; among matching rows the longest context wins, so a row with an
//! empty context acts as the default. Rows are keyed by instruction id for
//! generation calls and by the fully rendered scoring prompt for similarity
//! scoring, which lets one file serve both per-instruction decode tables and
//! per-pair canned scores. Output text is the plain concatenation of token
//! strings, so multi-word tokens carry their own spacing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ensure_scoring_prompt, BackendError, Demonstration, LmBackend, LogitsVector};
use crate::prompts::{render_scoring_prompt, InstructionPrompt};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    vocab: Vec<String>,
    eos: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    instruction: String,
    context: Vec<usize>,
    logits: Vec<f64>,
}

/// Hard cap on fixture text generation, so a table without a reachable eos
/// cannot loop forever.
const MAX_FIXTURE_TOKENS: usize = 256;

type TableRows = Vec<(Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone)]
pub struct FixtureLm {
    vocab: Vec<String>,
    eos: usize,
    /// key -> rows, each (context, logits); longest matching context wins.
    table: HashMap<String, TableRows>,
}

impl FixtureLm {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let mut lines = text.lines().enumerate();
        let (_, header_line) = lines
            .next()
            .ok_or_else(|| BackendError::Fixture("empty fixture file".into()))?;
        let header: Header = serde_json::from_str(header_line)
            .map_err(|e| BackendError::Fixture(format!("line 1: bad header: {e}")))?;
        if header.vocab.is_empty() {
            return Err(BackendError::Fixture("vocab is empty".into()));
        }
        if header.eos >= header.vocab.len() {
            return Err(BackendError::Fixture(format!(
                "eos id {} outside vocab of {}",
                header.eos,
                header.vocab.len()
            )));
        }
        let mut table: HashMap<String, TableRows> = HashMap::new();
        for (idx, line) in lines {
            let row: Row = serde_json::from_str(line)
                .map_err(|e| BackendError::Fixture(format!("line {}: {e}", idx + 1)))?;
            if row.logits.len() != header.vocab.len() {
                return Err(BackendError::Fixture(format!(
                    "line {}: {} logits for vocab of {}",
                    idx + 1,
                    row.logits.len(),
                    header.vocab.len()
                )));
            }
            if row.logits.iter().any(|v| !v.is_finite()) {
                return Err(BackendError::Fixture(format!(
                    "line {}: non-finite logit",
                    idx + 1
                )));
            }
            if row.context.iter().any(|&t| t >= header.vocab.len()) {
                return Err(BackendError::Fixture(format!(
                    "line {}: context token outside vocab",
                    idx + 1
                )));
            }
            let rows = table.entry(row.instruction).or_default();
            if rows.iter().any(|(ctx, _)| *ctx == row.context) {
                return Err(BackendError::Fixture(format!(
                    "line {}: duplicate (instruction, context) entry",
                    idx + 1
                )));
            }
            rows.push((row.context, row.logits));
        }
        Ok(Self {
            vocab: header.vocab,
            eos: header.eos,
            table,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    /// Logits for an arbitrary conditioning key, e.g. a rendered scoring
    /// prompt.
    pub fn logits_for_key(
        &self,
        key: &str,
        prefix: &[usize],
    ) -> Result<LogitsVector, BackendError> {
        let rows = self
            .table
            .get(key)
            .ok_or_else(|| BackendError::Fixture(format!("no rows for key {key:?}")))?;
        let mut best: Option<&(Vec<usize>, Vec<f64>)> = None;
        for row in rows {
            if row.0.len() <= prefix.len()
                && prefix.ends_with(&row.0)
                && best.is_none_or(|b| row.0.len() > b.0.len())
            {
                best = Some(row);
            }
        }
        let (_, logits) = best.ok_or_else(|| {
            BackendError::Fixture(format!("no row for key {key:?} matches prefix {prefix:?}"))
        })?;
        LogitsVector::new(logits.clone())
    }

    /// Plain greedy decode from the table; concatenates token texts until
    /// eos. Used for fixture text generation and scoring.
    fn decode_greedy(&self, key: &str) -> Result<String, BackendError> {
        let mut prefix = Vec::new();
        let mut out = String::new();
        for _ in 0..MAX_FIXTURE_TOKENS {
            let logits = self.logits_for_key(key, &prefix)?;
            let tok = logits.argmax();
            if tok == self.eos {
                break;
            }
            out.push_str(&self.vocab[tok]);
            prefix.push(tok);
        }
        Ok(out)
    }
}

impl LmBackend for FixtureLm {
    fn name(&self) -> &str {
        "fixture"
    }

    fn supports_logits(&self) -> bool {
        true
    }

    fn next_token_logits(
        &self,
        instruction: &InstructionPrompt,
        _input: &str,
        prefix: &[usize],
        _demos: &[Demonstration],
    ) -> Result<LogitsVector, BackendError> {
        self.logits_for_key(&instruction.id, prefix)
    }

    fn token_text(&self, id: usize) -> Result<String, BackendError> {
        self.vocab
            .get(id)
            .cloned()
            .ok_or(BackendError::UnknownToken(id))
    }

    fn is_eos(&self, id: usize) -> bool {
        id == self.eos
    }

    fn generate_text(
        &self,
        instruction: &InstructionPrompt,
        _input: &str,
        _demos: &[Demonstration],
    ) -> Result<String, BackendError> {
        let out = self.decode_greedy(&instruction.id)?;
        let out = out.trim();
        if out.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        Ok(out.to_string())
    }

    fn score_similarity(
        &self,
        x: &str,
        y: &str,
        prompt: &InstructionPrompt,
    ) -> Result<String, BackendError> {
        ensure_scoring_prompt(prompt)?;
        self.decode_greedy(&render_scoring_prompt(&prompt.template, x, y))
    }
}

enum RowLogits {
    Dense(Vec<f64>),
    Sparse(Vec<(usize, f64)>),
}

/// Programmatic construction of fixture tables for tests and demos.
pub struct FixtureTableBuilder {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    eos: usize,
    rows: Vec<(String, Vec<usize>, RowLogits)>,
}

impl Default for FixtureTableBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl FixtureTableBuilder {
    /// Starts with an `"</s>"` eos token at id 0.
    pub fn new() -> Self {
        let mut b = Self {
            vocab: Vec::new(),
            index: HashMap::new(),
            eos: 0,
            rows: Vec::new(),
        };
        b.token("</s>");
        b
    }

    pub fn eos_id(&self) -> usize {
        self.eos
    }

    /// Intern a token string, returning its id.
    pub fn token(&mut self, text: &str) -> usize {
        if let Some(&id) = self.index.get(text) {
            return id;
        }
        let id = self.vocab.len();
        self.vocab.push(text.to_string());
        self.index.insert(text.to_string(), id);
        id
    }

    /// Add a row with explicit logits over the final vocabulary.
    pub fn row_dense(&mut self, key: &str, context: Vec<usize>, logits: Vec<f64>) -> &mut Self {
        self.rows
            .push((key.to_string(), context, RowLogits::Dense(logits)));
        self
    }

    /// Make greedy decoding of `key` spell exactly `text` (one token) and
    /// stop.
    pub fn canned(&mut self, key: &str, text: &str) -> &mut Self {
        let tok = self.token(text);
        self.rows.push((
            key.to_string(),
            Vec::new(),
            RowLogits::Sparse(vec![(tok, 1.0)]),
        ));
        self.rows.push((
            key.to_string(),
            vec![tok],
            RowLogits::Sparse(vec![(self.eos, 1.0)]),
        ));
        self
    }

    /// Make greedy decoding of `key` emit eos immediately.
    pub fn canned_empty(&mut self, key: &str) -> &mut Self {
        self.rows.push((
            key.to_string(),
            Vec::new(),
            RowLogits::Sparse(vec![(self.eos, 1.0)]),
        ));
        self
    }

    pub fn to_jsonl(&self) -> Result<String, BackendError> {
        let mut out = String::new();
        let header = Header {
            vocab: self.vocab.clone(),
            eos: self.eos,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for (key, context, logits) in &self.rows {
            let dense = match logits {
                RowLogits::Dense(v) => {
                    if v.len() != self.vocab.len() {
                        return Err(BackendError::Fixture(format!(
                            "dense row for {key:?} has {} logits, vocab is {}",
                            v.len(),
                            self.vocab.len()
                        )));
                    }
                    v.clone()
                }
                RowLogits::Sparse(entries) => {
                    let mut v = vec![0.0; self.vocab.len()];
                    for &(id, logit) in entries {
                        v[id] = logit;
                    }
                    v
                }
            };
            let row = Row {
                instruction: key.clone(),
                context: context.clone(),
                logits: dense,
            };
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn build(&self) -> Result<FixtureLm, BackendError> {
        FixtureLm::parse(&self.to_jsonl()?)
    }

    pub fn write(&self, path: &Path) -> Result<(), BackendError> {
        let text = self.to_jsonl()?;
        crate::corpus::atomic_write(path, text.as_bytes())
            .map_err(|e| BackendError::Fixture(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{PromptCatalog, PromptKind};

    fn instr(id: &str, kind: PromptKind) -> InstructionPrompt {
        InstructionPrompt {
            id: id.into(),
            kind,
            template: format!("template for {id}"),
        }
    }

    #[test]
    fn table_lookup_returns_exact_row() {
        let mut b = FixtureTableBuilder::new();
        let a = b.token("a");
        let bb = b.token("b");
        b.row_dense("ent-1", vec![], vec![0.0, 2.0, 1.0]);
        b.row_dense("ent-1", vec![a], vec![0.5, 0.0, 3.0]);
        b.row_dense("ent-1", vec![bb], vec![9.0, 0.0, 0.0]);
        let lm = b.build().unwrap();
        let e1 = instr("ent-1", PromptKind::Entailment);
        let v = lm.next_token_logits(&e1, "x", &[], &[]).unwrap();
        assert_eq!(v.values(), &[0.0, 2.0, 1.0]);
        // longest suffix: prefix [a, b] matches context [b]
        let v = lm.next_token_logits(&e1, "x", &[a, bb], &[]).unwrap();
        assert_eq!(v.values(), &[9.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_row_is_an_error() {
        let lm = FixtureTableBuilder::new().build().unwrap();
        let e1 = instr("ent-1", PromptKind::Entailment);
        assert!(matches!(
            lm.next_token_logits(&e1, "x", &[], &[]),
            Err(BackendError::Fixture(_))
        ));
    }

    #[test]
    fn duplicate_context_rejected() {
        let mut b = FixtureTableBuilder::new();
        b.token("a");
        b.row_dense("k", vec![], vec![0.0, 1.0]);
        b.row_dense("k", vec![], vec![1.0, 0.0]);
        assert!(matches!(b.build(), Err(BackendError::Fixture(_))));
    }

    #[test]
    fn canned_generation_and_empty() {
        let mut b = FixtureTableBuilder::new();
        b.canned("ent-1", "A man plays guitar.");
        b.canned_empty("con-1");
        let lm = b.build().unwrap();
        let out = lm
            .generate_text(&instr("ent-1", PromptKind::Entailment), "x", &[])
            .unwrap();
        assert_eq!(out, "A man plays guitar.");
        assert!(matches!(
            lm.generate_text(&instr("con-1", PromptKind::Contradiction), "x", &[]),
            Err(BackendError::EmptyGeneration)
        ));
    }

    #[test]
    fn scoring_keys_on_rendered_prompt() {
        let cat = PromptCatalog::builtin();
        let scoring = cat.scoring();
        let mut b = FixtureTableBuilder::new();
        b.canned(
            &render_scoring_prompt(&scoring.template, "x", "good"),
            "4.5",
        );
        b.canned(&render_scoring_prompt(&scoring.template, "x", "bad"), "0.0");
        let lm = b.build().unwrap();
        assert_eq!(lm.score_similarity("x", "good", scoring).unwrap(), "4.5");
        assert_eq!(lm.score_similarity("x", "bad", scoring).unwrap(), "0.0");
    }

    #[test]
    fn repeated_calls_are_identical() {
        let mut b = FixtureTableBuilder::new();
        b.token("a");
        b.row_dense("ent-1", vec![], vec![0.0, 1.0]);
        let lm = b.build().unwrap();
        let e1 = instr("ent-1", PromptKind::Entailment);
        let v1 = lm.next_token_logits(&e1, "x", &[], &[]).unwrap();
        let v2 = lm.next_token_logits(&e1, "x", &[], &[]).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture_lm.jsonl");
        let mut b = FixtureTableBuilder::new();
        b.canned("ent-1", "hello");
        b.write(&path).unwrap();
        let lm = FixtureLm::load(&path).unwrap();
        assert_eq!(
            lm.generate_text(&instr("ent-1", PromptKind::Entailment), "x", &[])
                .unwrap(),
            "hello"
        );
    }
}
