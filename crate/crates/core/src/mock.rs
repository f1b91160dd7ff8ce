//! Deterministic OpenAI-compatible server for tests and desk-scale runs.
//!
//! In fixture mode the server answers prompts whose SHA-256 hash appears in
//! the fixture table. In oracle mode it reads the planted label of the target
//! point (the last `⟦H⟧` / `⟦N⟧` marker in the prompt) and answers correctly
//! with probability `oracle_accuracy`, using a hash of the seed, the sampling
//! parameters and the prompt as its only source of randomness.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::prompt::{COT_CUE, RATIONALE_REQUEST};

pub const HALLUCINATION_MARKER: &str = "⟦H⟧";
pub const SUPPORTED_MARKER: &str = "⟦N⟧";

pub fn planted_marker(label: Label) -> &'static str {
    match label {
        Label::Hallucination => HALLUCINATION_MARKER,
        Label::NotHallucination => SUPPORTED_MARKER,
    }
}

/// Label of the last planted marker in `text`.
pub fn planted_label(text: &str) -> Option<Label> {
    let h = text.rfind(HALLUCINATION_MARKER);
    let n = text.rfind(SUPPORTED_MARKER);
    match (h, n) {
        (Some(h), Some(n)) if h > n => Some(Label::Hallucination),
        (Some(_), None) => Some(Label::Hallucination),
        (_, Some(_)) => Some(Label::NotHallucination),
        (None, None) => None,
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    Fixture,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureAnswer {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_yes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_no: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub mode: MockMode,
    #[serde(default)]
    pub fixtures: BTreeMap<String, FixtureAnswer>,
    #[serde(default = "one")]
    pub oracle_accuracy: f64,
    #[serde(default)]
    pub oracle_seed: u64,
    /// Per-model seed overrides, so one server can impersonate several
    /// independent annotators.
    #[serde(default)]
    pub model_seeds: BTreeMap<String, u64>,
    /// Fixed delay before every response.
    #[serde(default)]
    pub delay_ms: u64,
}

fn one() -> f64 {
    1.0
}

impl MockRule {
    pub fn oracle(accuracy: f64, seed: u64) -> Self {
        MockRule {
            mode: MockMode::Oracle,
            fixtures: BTreeMap::new(),
            oracle_accuracy: accuracy,
            oracle_seed: seed,
            model_seeds: BTreeMap::new(),
            delay_ms: 0,
        }
    }

    pub fn fixtures(fixtures: BTreeMap<String, FixtureAnswer>) -> Self {
        MockRule {
            mode: MockMode::Fixture,
            fixtures,
            ..MockRule::oracle(1.0, 0)
        }
    }

    pub fn load_fixtures(path: impl AsRef<Path>) -> Result<BTreeMap<String, FixtureAnswer>> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.oracle_accuracy) {
            return Err(Error::Config(format!(
                "oracle accuracy {} outside [0, 1]",
                self.oracle_accuracy
            )));
        }
        Ok(())
    }

    fn seed_for(&self, model: &str) -> u64 {
        self.model_seeds.get(model).copied().unwrap_or(self.oracle_seed)
    }
}

/// The fields of a chat-completion request the mock looks at.
#[derive(Debug, Clone, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub n: Option<u32>,
    #[serde(default)]
    pub logprobs: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockAnswer {
    pub text: String,
    pub lp_yes: Option<f64>,
    pub lp_no: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockFailure {
    FixtureMiss(String),
    NoPlantedLabel,
    BadRequest(String),
}

impl MockFailure {
    fn status(&self) -> StatusCode {
        match self {
            MockFailure::FixtureMiss(_) => StatusCode::NOT_FOUND,
            MockFailure::NoPlantedLabel => StatusCode::UNPROCESSABLE_ENTITY,
            MockFailure::BadRequest(_) => StatusCode::BAD_REQUEST,
        }
    }

    fn message(&self) -> String {
        match self {
            MockFailure::FixtureMiss(h) => format!("no fixture for prompt hash {h}"),
            MockFailure::NoPlantedLabel => "prompt carries no planted label marker".into(),
            MockFailure::BadRequest(m) => m.clone(),
        }
    }
}

fn uniform_pair(seed: u64, temperature: f64, top_p: f64, choice: u32, prompt: &str) -> (f64, f64) {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(temperature.to_bits().to_le_bytes());
    h.update(top_p.to_bits().to_le_bytes());
    h.update(choice.to_le_bytes());
    h.update(prompt.as_bytes());
    let digest = h.finalize();
    let word = |i: usize| u64::from_le_bytes(digest[i..i + 8].try_into().unwrap());
    let scale = 1.0 / (u64::MAX as f64 + 1.0);
    (word(0) as f64 * scale, word(8) as f64 * scale)
}

/// Answers a single request, one entry per requested choice.
pub fn answer(rule: &MockRule, request: &ChatRequest) -> std::result::Result<Vec<MockAnswer>, MockFailure> {
    let prompt = request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(|m| m.content.as_str())
        .ok_or_else(|| MockFailure::BadRequest("no user message".into()))?;
    let n = request.n.unwrap_or(1).max(1);

    match rule.mode {
        MockMode::Fixture => {
            let hash = prompt_hash(prompt);
            let fixture = rule
                .fixtures
                .get(&hash)
                .ok_or(MockFailure::FixtureMiss(hash))?;
            Ok((0..n)
                .map(|_| MockAnswer {
                    text: fixture.text.clone(),
                    lp_yes: fixture.lp_yes,
                    lp_no: fixture.lp_no,
                })
                .collect())
        }
        MockMode::Oracle => {
            if prompt.trim_end().ends_with(RATIONALE_REQUEST) {
                let supported = prompt.contains("The correct answer is yes.");
                let text = if supported {
                    "The hypothesis only restates information found in the source and target."
                } else {
                    "The hypothesis contains information that the source and target do not support."
                };
                return Ok((0..n)
                    .map(|_| MockAnswer {
                        text: text.into(),
                        lp_yes: None,
                        lp_no: None,
                    })
                    .collect());
            }
            let truth = planted_label(prompt).ok_or(MockFailure::NoPlantedLabel)?;
            let seed = rule.seed_for(&request.model);
            let temperature = request.temperature.unwrap_or(1.0);
            let top_p = request.top_p.unwrap_or(1.0);
            let cot = prompt.trim_end().ends_with(COT_CUE);
            Ok((0..n)
                .map(|choice| {
                    let (u_correct, u_conf) = uniform_pair(seed, temperature, top_p, choice, prompt);
                    let label = if u_correct < rule.oracle_accuracy {
                        truth
                    } else {
                        match truth {
                            Label::Hallucination => Label::NotHallucination,
                            Label::NotHallucination => Label::Hallucination,
                        }
                    };
                    // probability mass on the emitted answer, in [0.55, 0.95)
                    let confidence = 0.55 + 0.4 * u_conf;
                    let (p_yes, p_no) = match label {
                        Label::NotHallucination => (confidence, 1.0 - confidence),
                        Label::Hallucination => (1.0 - confidence, confidence),
                    };
                    let word = label.answer_word();
                    let text = if cot {
                        format!("The hypothesis was checked against the source and target. Answer: {word}")
                    } else {
                        word.to_string()
                    };
                    MockAnswer {
                        text,
                        lp_yes: Some(p_yes.ln()),
                        lp_no: Some(p_no.ln()),
                    }
                })
                .collect())
        }
    }
}

fn response_body(request: &ChatRequest, prompt_id: &str, answers: &[MockAnswer]) -> Value {
    let want_logprobs = request.logprobs.unwrap_or(false);
    let choices: Vec<Value> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let logprobs = if want_logprobs {
                let mut alts: Vec<(&str, f64)> = Vec::new();
                if let Some(lp) = a.lp_yes {
                    alts.push(("yes", lp));
                }
                if let Some(lp) = a.lp_no {
                    alts.push(("no", lp));
                }
                alts.sort_by(|x, y| y.1.total_cmp(&x.1));
                let first = a.text.split_whitespace().next().unwrap_or("").to_string();
                let first_lp = alts.first().map(|x| x.1).unwrap_or(0.0);
                json!({"content": [{
                    "token": first,
                    "logprob": first_lp,
                    "top_logprobs": alts.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect::<Vec<_>>(),
                }]})
            } else {
                Value::Null
            };
            json!({
                "index": i,
                "message": {"role": "assistant", "content": a.text},
                "logprobs": logprobs,
                "finish_reason": "stop",
            })
        })
        .collect();
    json!({
        "id": format!("mockcmpl-{}", &prompt_id[..16]),
        "object": "chat.completion",
        "created": 0,
        "model": request.model,
        "choices": choices,
        "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
    })
}

struct ServerState {
    rule: MockRule,
    requests: AtomicU64,
}

async fn chat_completions(State(state): State<Arc<ServerState>>, body: String) -> Response {
    state.requests.fetch_add(1, Ordering::SeqCst);
    if state.rule.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.rule.delay_ms)).await;
    }
    let request: ChatRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return failure(MockFailure::BadRequest(e.to_string())),
    };
    let prompt_id = request
        .messages
        .last()
        .map(|m| prompt_hash(&m.content))
        .unwrap_or_else(|| prompt_hash(""));
    match answer(&state.rule, &request) {
        Ok(answers) => Json(response_body(&request, &prompt_id, &answers)).into_response(),
        Err(f) => failure(f),
    }
}

fn failure(f: MockFailure) -> Response {
    let body = json!({"error": {"message": f.message(), "type": "mock_error"}});
    (f.status(), Json(body)).into_response()
}

/// Handle to a running mock server. Dropping it stops the server.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub async fn start(rule: MockRule, addr: SocketAddr) -> Result<Self> {
        rule.validate()?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(format!("binding {addr}"), e))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::io("reading bound address", e))?;
        let state = Arc::new(ServerState {
            rule,
            requests: AtomicU64::new(0),
        });
        let app = Router::new()
            .route("/chat/completions", post(chat_completions))
            .route("/v1/chat/completions", post(chat_completions))
            .with_state(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = serve.await {
                log::error!("mock server stopped: {e}");
            }
        });
        Ok(MockServer {
            addr,
            state,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub async fn start_local(rule: MockRule) -> Result<Self> {
        Self::start(rule, SocketAddr::from(([127, 0, 0, 1], 0))).await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received since startup.
    pub fn request_count(&self) -> u64 {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Waits until the server task ends (it runs until stopped).
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
