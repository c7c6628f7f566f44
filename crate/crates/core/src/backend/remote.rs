//! OpenAI-compatible HTTP backends.
//!
//! Two wire modes:
//!
//! - remote-logits: `POST {endpoint}/v1/completions` with
//!   `{"model":…,"prompt":…,"max_tokens":1,"temperature":0,"logprobs":k,"echo":false}`,
//!   reading `choices[0].logprobs.top_logprobs[0]`.
//! - remote-text: `POST {endpoint}/v1/chat/completions` with
//!   `{"model":…,"messages":[{"role":"user","content":…}],"temperature":0}`,
//!   reading `choices[0].message.content`.
//!
//! Requests are deterministic (temperature 0). The API key comes from the
//! `MULTICSR_API_KEY` environment variable and is never logged. A
//! [`ReplayTransport`] swaps the network for recorded request/response
//! exchanges, for offline tests.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    ensure_scoring_prompt, render_generation_prompt, with_retries, BackendConfig, BackendError,
    BackendKind, Demonstration, LmBackend, LogitsVector,
};
use crate::mask::ReferenceEmbed;
use crate::prompts::{render_scoring_prompt, InstructionPrompt};
use crate::train::TrainError;

/// Token strings that end a greedy decode over the logits interface.
const STOP_TOKENS: [&str; 4] = ["</s>", "<|endoftext|>", "<|eot_id|>", "<|im_end|>"];

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        timeout: Duration,
        body: &str,
    ) -> Result<String, BackendError>;
}

/// Real HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        timeout: Duration,
        body: &str,
    ) -> Result<String, BackendError> {
        let mut req = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .timeout(timeout)
            .body(body.to_string());
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transport(e.without_url().to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!(
                "{url} returned {status}: {text}"
            )));
        }
        Ok(text)
    }
}

/// One recorded request/response pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayExchange {
    pub url: String,
    pub request_body: String,
    pub response_body: String,
}

/// Serves recorded exchanges in order, asserting that each outgoing request
/// body is byte-identical to the recording.
pub struct ReplayTransport {
    exchanges: Mutex<std::collections::VecDeque<ReplayExchange>>,
}

impl ReplayTransport {
    pub fn new(exchanges: Vec<ReplayExchange>) -> Self {
        Self {
            exchanges: Mutex::new(exchanges.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.exchanges.lock().unwrap().len()
    }
}

impl Transport for ReplayTransport {
    fn post_json(
        &self,
        url: &str,
        _api_key: Option<&str>,
        _timeout: Duration,
        body: &str,
    ) -> Result<String, BackendError> {
        let expected = self
            .exchanges
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| BackendError::Transport("replay transport exhausted".into()))?;
        if url != expected.url {
            return Err(BackendError::Transport(format!(
                "replay url mismatch: got {url}, recorded {}",
                expected.url
            )));
        }
        if body != expected.request_body {
            return Err(BackendError::Transport(format!(
                "replay request mismatch:\n  got      {body}\n  recorded {}",
                expected.request_body
            )));
        }
        Ok(expected.response_body)
    }
}

/// A transport that always fails, for timeout/error-path tests.
pub struct FailingTransport(pub String);

impl Transport for FailingTransport {
    fn post_json(
        &self,
        _url: &str,
        _api_key: Option<&str>,
        _timeout: Duration,
        _body: &str,
    ) -> Result<String, BackendError> {
        Err(BackendError::Transport(self.0.clone()))
    }
}

#[derive(Serialize)]
struct CompletionsRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: u32,
    logprobs: usize,
    echo: bool,
}

/// Exact request body for the remote-logits mode.
pub fn completions_request_body(model: &str, prompt: &str, top_k_logprobs: usize) -> String {
    serde_json::to_string(&CompletionsRequest {
        model,
        prompt,
        max_tokens: 1,
        temperature: 0,
        logprobs: top_k_logprobs,
        echo: false,
    })
    .expect("request serializes")
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: u32,
}

/// Exact request body for the remote-text mode.
pub fn chat_request_body(model: &str, content: &str) -> String {
    serde_json::to_string(&ChatRequest {
        model,
        messages: [ChatMessage {
            role: "user",
            content,
        }],
        temperature: 0,
    })
    .expect("request serializes")
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: [&'a str; 1],
}

/// Request body for the reference-embedding endpoint.
pub fn embeddings_request_body(model: &str, input: &str) -> String {
    serde_json::to_string(&EmbeddingsRequest {
        model,
        input: [input],
    })
    .expect("request serializes")
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    logprobs: Option<LogprobsBlock>,
}

#[derive(Deserialize)]
struct LogprobsBlock {
    top_logprobs: Vec<BTreeMap<String, f64>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessageOwned,
}

#[derive(Deserialize)]
struct ChatMessageOwned {
    content: String,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Grows as top-k responses mention new token strings; ids are assigned in
/// deterministic (sorted-within-response) order.
#[derive(Default)]
struct TokenRegistry {
    ids: HashMap<String, usize>,
    texts: Vec<String>,
}

impl TokenRegistry {
    fn intern(&mut self, text: &str) -> usize {
        if let Some(&id) = self.ids.get(text) {
            return id;
        }
        let id = self.texts.len();
        self.texts.push(text.to_string());
        self.ids.insert(text.to_string(), id);
        id
    }
}

/// Client for both remote kinds.
pub struct RemoteBackend {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    registry: RwLock<TokenRegistry>,
    api_key: Option<String>,
    name: String,
}

impl RemoteBackend {
    /// Build from config; reads `MULTICSR_API_KEY` from the environment.
    pub fn new(config: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self, BackendError> {
        let api_key = std::env::var("MULTICSR_API_KEY").ok();
        Self::with_api_key(config, transport, api_key)
    }

    pub fn with_api_key(
        config: BackendConfig,
        transport: Arc<dyn Transport>,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        let name = match config.kind {
            BackendKind::RemoteLogits => "remote-logits",
            BackendKind::RemoteText => "remote-text",
            BackendKind::Fixture => {
                return Err(BackendError::InvalidConfig(
                    "fixture kind cannot back a RemoteBackend".into(),
                ))
            }
        };
        Ok(Self {
            config,
            transport,
            registry: RwLock::new(TokenRegistry::default()),
            api_key,
            name: name.to_string(),
        })
    }

    fn url(&self, path: &str) -> String {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        format!("{}{path}", endpoint.trim_end_matches('/'))
    }

    fn model(&self) -> &str {
        self.config.model.as_deref().unwrap_or_default()
    }

    /// POST with transport-level retries (exponential backoff).
    fn post(&self, url: &str, body: &str) -> Result<String, BackendError> {
        with_retries(
            self.config.max_retries,
            Duration::from_millis(self.config.retry_base_ms),
            |e| matches!(e, BackendError::Transport(_)),
            || {
                self.transport
                    .post_json(url, self.api_key.as_deref(), self.config.timeout(), body)
            },
        )
    }

    /// One completions step: the top-k logprob map for the next token.
    fn fetch_top_logprobs(&self, prompt: &str) -> Result<BTreeMap<String, f64>, BackendError> {
        let body = completions_request_body(self.model(), prompt, self.config.top_k_logprobs);
        let text = self.post(&self.url("/v1/completions"), &body)?;
        let resp: CompletionsResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("bad completions response: {e}")))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Transport("no choices in response".into()))?;
        let block = choice
            .logprobs
            .ok_or_else(|| BackendError::LogprobsUnavailable("response has no logprobs".into()))?;
        block
            .top_logprobs
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::LogprobsUnavailable("top_logprobs is empty".into()))
    }

    /// Turn a top-k map into a dense vector over the token registry. Tokens
    /// absent from the response get `min(returned logprobs) - 10`, which
    /// keeps unseen tokens from winning after contrast while staying finite.
    fn reconcile(&self, top: &BTreeMap<String, f64>) -> Result<LogitsVector, BackendError> {
        if top.is_empty() {
            return Err(BackendError::LogprobsUnavailable(
                "empty top_logprobs map".into(),
            ));
        }
        let floor = top.values().fold(f64::INFINITY, |a, &b| a.min(b)) - 10.0;
        if !floor.is_finite() {
            return Err(BackendError::LogprobsUnavailable(
                "non-finite logprob in response".into(),
            ));
        }
        let mut registry = self.registry.write().unwrap();
        let entries: Vec<(usize, f64)> = top
            .iter()
            .map(|(tok, &lp)| (registry.intern(tok), lp))
            .collect();
        let mut values = vec![floor; registry.texts.len()];
        for (id, lp) in entries {
            values[id] = lp;
        }
        LogitsVector::with_fill(values, floor)
    }

    fn prefix_text(&self, prefix: &[usize]) -> Result<String, BackendError> {
        let registry = self.registry.read().unwrap();
        let mut s = String::new();
        for &id in prefix {
            s.push_str(
                registry
                    .texts
                    .get(id)
                    .ok_or(BackendError::UnknownToken(id))?,
            );
        }
        Ok(s)
    }

    fn token_is_stop(text: &str) -> bool {
        text.contains('\n') || STOP_TOKENS.contains(&text)
    }

    /// Greedy multi-token completion via repeated single-token logit calls
    /// (remote-logits) or one chat call (remote-text).
    fn complete_text(&self, prompt: &str) -> Result<String, BackendError> {
        match self.config.kind {
            BackendKind::RemoteText => {
                let body = chat_request_body(self.model(), prompt);
                let text = self.post(&self.url("/v1/chat/completions"), &body)?;
                let resp: ChatResponse = serde_json::from_str(&text)
                    .map_err(|e| BackendError::Transport(format!("bad chat response: {e}")))?;
                let choice = resp
                    .choices
                    .into_iter()
                    .next()
                    .ok_or_else(|| BackendError::Transport("no choices in response".into()))?;
                Ok(choice.message.content)
            }
            BackendKind::RemoteLogits => {
                let mut text = String::new();
                let mut conditioned = prompt.to_string();
                for _ in 0..self.config.max_text_tokens {
                    let top = self.fetch_top_logprobs(&conditioned)?;
                    let logits = self.reconcile(&top)?;
                    let tok = logits.argmax();
                    let tok_text = self.token_text(tok)?;
                    if Self::token_is_stop(&tok_text) {
                        break;
                    }
                    conditioned.push_str(&tok_text);
                    text.push_str(&tok_text);
                }
                Ok(text)
            }
            BackendKind::Fixture => unreachable!("checked at construction"),
        }
    }
}

impl LmBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_logits(&self) -> bool {
        self.config.kind == BackendKind::RemoteLogits
    }

    fn next_token_logits(
        &self,
        instruction: &InstructionPrompt,
        input: &str,
        prefix: &[usize],
        demos: &[Demonstration],
    ) -> Result<LogitsVector, BackendError> {
        if self.config.kind != BackendKind::RemoteLogits {
            return Err(BackendError::UnsupportedBackend(self.name.clone()));
        }
        let mut prompt = render_generation_prompt(instruction, input, demos);
        prompt.push_str(&self.prefix_text(prefix)?);
        let top = self.fetch_top_logprobs(&prompt)?;
        self.reconcile(&top)
    }

    fn token_text(&self, id: usize) -> Result<String, BackendError> {
        let registry = self.registry.read().unwrap();
        registry
            .texts
            .get(id)
            .cloned()
            .ok_or(BackendError::UnknownToken(id))
    }

    fn is_eos(&self, id: usize) -> bool {
        let registry = self.registry.read().unwrap();
        registry
            .texts
            .get(id)
            .is_some_and(|t| Self::token_is_stop(t))
    }

    fn generate_text(
        &self,
        instruction: &InstructionPrompt,
        input: &str,
        demos: &[Demonstration],
    ) -> Result<String, BackendError> {
        let prompt = render_generation_prompt(instruction, input, demos);
        with_retries(
            self.config.max_retries,
            Duration::from_millis(self.config.retry_base_ms),
            |e| matches!(e, BackendError::EmptyGeneration),
            || {
                let out = self.complete_text(&prompt)?;
                let out = out.trim();
                if out.is_empty() {
                    return Err(BackendError::EmptyGeneration);
                }
                Ok(out.to_string())
            },
        )
    }

    fn score_similarity(
        &self,
        x: &str,
        y: &str,
        prompt: &InstructionPrompt,
    ) -> Result<String, BackendError> {
        ensure_scoring_prompt(prompt)?;
        self.complete_text(&render_scoring_prompt(&prompt.template, x, y))
    }
}

/// Reference embedder backed by `POST {endpoint}/v1/embeddings`.
///
/// Responses are cached by text, so identical text always yields an
/// identical vector within a run.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    transport: Arc<dyn Transport>,
    api_key: Option<String>,
    timeout: Duration,
    max_retries: u32,
    retry_base: Duration,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            transport,
            api_key: std::env::var("MULTICSR_API_KEY").ok(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            retry_base: Duration::from_millis(1000),
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl ReferenceEmbed for RemoteEmbedder {
    fn embed_ref(&self, text: &str) -> Result<Vec<f64>, TrainError> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let url = format!("{}/v1/embeddings", self.endpoint.trim_end_matches('/'));
        let body = embeddings_request_body(&self.model, text);
        let resp_text = with_retries(
            self.max_retries,
            self.retry_base,
            |e| matches!(e, BackendError::Transport(_)),
            || {
                self.transport
                    .post_json(&url, self.api_key.as_deref(), self.timeout, &body)
            },
        )
        .map_err(|e| TrainError::Reference(e.to_string()))?;
        let resp: EmbeddingsResponse = serde_json::from_str(&resp_text)
            .map_err(|e| TrainError::Reference(format!("bad embeddings response: {e}")))?;
        let vector = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| TrainError::Reference("no data in embeddings response".into()))?
            .embedding;
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Reference(
                "embedding vector empty or non-finite".into(),
            ));
        }
        self.cache
            .lock()
            .unwrap()
            .insert(text.to_string(), vector.clone());
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_config() -> BackendConfig {
        BackendConfig {
            kind: BackendKind::RemoteLogits,
            endpoint: Some("http://lm.test".into()),
            model: Some("test-model".into()),
            top_k_logprobs: 3,
            timeout_secs: 1,
            max_retries: 0,
            retry_base_ms: 0,
            max_text_tokens: 8,
            fixture_path: None,
        }
    }

    fn text_config() -> BackendConfig {
        BackendConfig {
            kind: BackendKind::RemoteText,
            ..logits_config()
        }
    }

    #[test]
    fn completions_request_is_bit_exact() {
        assert_eq!(
            completions_request_body("m", "p", 5),
            r#"{"model":"m","prompt":"p","max_tokens":1,"temperature":0,"logprobs":5,"echo":false}"#
        );
    }

    #[test]
    fn chat_request_is_bit_exact() {
        assert_eq!(
            chat_request_body("m", "hello"),
            r#"{"model":"m","messages":[{"role":"user","content":"hello"}],"temperature":0}"#
        );
    }

    #[test]
    fn remote_text_rejects_logits() {
        let backend = RemoteBackend::with_api_key(
            text_config(),
            Arc::new(FailingTransport("unused".into())),
            None,
        )
        .unwrap();
        let instr = InstructionPrompt {
            id: "ent-1".into(),
            kind: crate::prompts::PromptKind::Entailment,
            template: "t".into(),
        };
        assert!(matches!(
            backend.next_token_logits(&instr, "x", &[], &[]),
            Err(BackendError::UnsupportedBackend(_))
        ));
    }

    #[test]
    fn reconcile_assigns_floor_and_preserves_argmax() {
        let backend = RemoteBackend::with_api_key(
            logits_config(),
            Arc::new(FailingTransport("unused".into())),
            None,
        )
        .unwrap();
        let mut top = BTreeMap::new();
        top.insert(" Paris".to_string(), -0.1);
        top.insert(" London".to_string(), -2.5);
        top.insert(" Rome".to_string(), -3.0);
        let v = backend.reconcile(&top).unwrap();
        assert_eq!(v.vocab_size(), 3);
        assert_eq!(v.fill(), Some(-13.0));
        let best = backend.token_text(v.argmax()).unwrap();
        assert_eq!(best, " Paris");
        // a later call mentioning a new token extends the registry; earlier
        // ids keep their meaning and absent ids get the new floor
        let mut top2 = BTreeMap::new();
        top2.insert(" Berlin".to_string(), -0.2);
        let v2 = backend.reconcile(&top2).unwrap();
        assert_eq!(v2.vocab_size(), 4);
        assert_eq!(backend.token_text(v2.argmax()).unwrap(), " Berlin");
        assert_eq!(v2.values()[0], -10.2);
    }

    #[test]
    fn empty_chat_content_retries_then_errors() {
        let exchanges: Vec<ReplayExchange> = (0..3)
            .map(|_| ReplayExchange {
                url: "http://lm.test/v1/chat/completions".into(),
                request_body: chat_request_body("test-model", "Input: x\nt\nOutput:"),
                response_body: r#"{"choices":[{"message":{"role":"assistant","content":""}}]}"#
                    .into(),
            })
            .collect();
        let transport = Arc::new(ReplayTransport::new(exchanges));
        let mut config = text_config();
        config.max_retries = 2;
        let backend = RemoteBackend::with_api_key(config, transport.clone(), None).unwrap();
        let instr = InstructionPrompt {
            id: "ent-1".into(),
            kind: crate::prompts::PromptKind::Entailment,
            template: "t".into(),
        };
        match backend.generate_text(&instr, "x", &[]) {
            Err(BackendError::EmptyGeneration) => {}
            other => panic!("expected EmptyGeneration, got {other:?}"),
        }
        assert_eq!(transport.remaining(), 0, "expected exactly three attempts");
    }

    #[test]
    fn transport_failure_surfaces_as_transport_error() {
        let backend = RemoteBackend::with_api_key(
            text_config(),
            Arc::new(FailingTransport("connection timed out".into())),
            None,
        )
        .unwrap();
        let cat = crate::prompts::PromptCatalog::builtin();
        match backend.score_similarity("a", "b", cat.scoring()) {
            Err(BackendError::Transport(msg)) => assert!(msg.contains("timed out")),
            other => panic!("expected Transport, got {other:?}"),
        }
    }

    #[test]
    fn remote_embedder_caches_by_text() {
        let url = "http://embed.test/v1/embeddings";
        let transport = Arc::new(ReplayTransport::new(vec![ReplayExchange {
            url: url.into(),
            request_body: embeddings_request_body("emb", "hello"),
            response_body: r#"{"data":[{"embedding":[0.5,0.5]}]}"#.into(),
        }]));
        let embedder = RemoteEmbedder::new("http://embed.test", "emb", transport.clone());
        let v1 = embedder.embed_ref("hello").unwrap();
        let v2 = embedder.embed_ref("hello").unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1, vec![0.5, 0.5]);
        assert_eq!(transport.remaining(), 0);
    }
}
