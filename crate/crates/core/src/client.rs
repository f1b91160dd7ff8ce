//! OpenAI-compatible chat-completion client, answer parsing and
//! hallucination-probability estimation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::data::{DataPoint, Label, Task};
use crate::error::{Error, Result};
use crate::prompt::{assemble_prompt, Demonstration, PromptConfig, RenderedPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_n_samples")]
    pub n_samples: u32,
    #[serde(default)]
    pub logprob_mode: bool,
}

fn default_top_p() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    16
}
fn default_n_samples() -> u32 {
    1
}

impl SamplingParams {
    /// Greedy, single-sample, log-probability scoring.
    pub fn greedy(id: impl Into<String>) -> Self {
        SamplingParams {
            id: id.into(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 16,
            n_samples: 1,
            logprob_mode: true,
        }
    }

    /// Settings for free-text rationale generation.
    pub fn rationale() -> Self {
        SamplingParams {
            id: "rationale".into(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 256,
            n_samples: 1,
            logprob_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("sampling params `{}`: {m}", self.id)));
        if self.id.is_empty() {
            return fail("id must be non-empty");
        }
        if !(self.temperature >= 0.0) {
            return fail("temperature must be nonnegative");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail("top_p must lie in (0, 1]");
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be positive");
        }
        if self.n_samples == 0 {
            return fail("n_samples must be positive");
        }
        if self.logprob_mode && self.n_samples != 1 {
            return fail("logprob_mode requires n_samples = 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub model_id: String,
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
    /// Name of an environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First backoff ceiling; doubles with each retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1_000
}

impl ModelEndpoint {
    pub fn new(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        ModelEndpoint {
            model_id: model_id.into(),
            base_url: base_url.into(),
            auth_token: None,
            auth_token_env: None,
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    fn token(&self) -> Option<String> {
        if let Some(t) = &self.auth_token {
            return Some(t.clone());
        }
        self.auth_token_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok())
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub point_id: String,
    pub model_id: String,
    pub params_id: String,
    /// `None` marks an undecided prediction.
    pub label: Option<Label>,
    pub p_halluc: Option<f64>,
    pub raw_completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Prediction {
    pub fn undecided(point_id: &str, endpoint: &ModelEndpoint, params: &SamplingParams, err: &Error) -> Self {
        Prediction {
            point_id: point_id.to_string(),
            model_id: endpoint.model_id.clone(),
            params_id: params.id.clone(),
            label: None,
            p_halluc: None,
            raw_completion: String::new(),
            error: Some(err.to_string()),
        }
    }

    pub fn is_undecided(&self) -> bool {
        self.label.is_none()
    }
}

/// One generated choice of a chat completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Top alternatives for the first generated token, when requested.
    pub first_token_logprobs: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub choices: Vec<Completion>,
}

/// Shared HTTP client with a cap on in-flight requests.
#[derive(Clone)]
pub struct InferenceClient {
    http: reqwest::Client,
    permits: Arc<Semaphore>,
    max_in_flight: usize,
    attempts: Arc<AtomicU64>,
}

impl InferenceClient {
    pub fn new(max_in_flight: usize) -> Self {
        let max_in_flight = max_in_flight.max(1);
        InferenceClient {
            http: reqwest::Client::new(),
            permits: Arc::new(Semaphore::new(max_in_flight)),
            max_in_flight,
            attempts: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Total HTTP attempts issued by this client, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub async fn complete(
        &self,
        prompt: &str,
        endpoint: &ModelEndpoint,
        params: &SamplingParams,
    ) -> Result<RawResponse> {
        let mut body = json!({
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "n": params.n_samples,
        });
        if params.logprob_mode {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(5);
        }

        let url = endpoint.completions_url();
        let token = endpoint.token();
        let total = endpoint.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..total {
            if attempt > 0 {
                let ceiling = endpoint
                    .backoff_base_ms
                    .saturating_mul(1u64 << (attempt - 1).min(20));
                let wait = rand::rng().random_range(0..=ceiling);
                tokio::time::sleep(Duration::from_millis(wait)).await;
            }
            let _permit = self.permits.acquire().await.expect("semaphore never closed");
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let mut req = self
                .http
                .post(&url)
                .timeout(Duration::from_millis(endpoint.request_timeout_ms))
                .json(&body);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            match req.send().await {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let value: Value = resp.json().await.map_err(|e| Error::Protocol {
                            model_id: endpoint.model_id.clone(),
                            message: format!("invalid JSON body: {e}"),
                        })?;
                        return parse_response(&value, &endpoint.model_id);
                    }
                    let text = resp.text().await.unwrap_or_default();
                    last_error = format!("HTTP {status}: {text}");
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(Error::Endpoint {
                            model_id: endpoint.model_id.clone(),
                            attempts: attempt + 1,
                            message: last_error,
                        });
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
            log::debug!(
                "{} attempt {}/{} failed: {last_error}",
                endpoint.model_id,
                attempt + 1,
                total
            );
        }
        Err(Error::Endpoint {
            model_id: endpoint.model_id.clone(),
            attempts: total,
            message: last_error,
        })
    }

    /// Scores one rendered prompt, producing a labelled probability.
    pub async fn estimate_probability(
        &self,
        prompt: &RenderedPrompt,
        endpoint: &ModelEndpoint,
        params: &SamplingParams,
    ) -> Result<Prediction> {
        let response = self.complete(&prompt.text, endpoint, params).await?;
        let (label, p) = score_response(&response, params.logprob_mode, prompt.cot)?;
        Ok(Prediction {
            point_id: prompt.point_id.clone(),
            model_id: endpoint.model_id.clone(),
            params_id: params.id.clone(),
            label: Some(label),
            p_halluc: Some(p),
            raw_completion: response
                .choices
                .first()
                .map(|c| c.text.clone())
                .unwrap_or_default(),
            error: None,
        })
    }

    /// Predicts every point, keeping input order. Per-point failures become
    /// undecided records; only a batch in which every point hit an endpoint
    /// failure is an error.
    pub async fn predict_batch(
        &self,
        points: &[DataPoint],
        demos: &BTreeMap<Task, Vec<Demonstration>>,
        config: &PromptConfig,
        endpoint: &ModelEndpoint,
        params: &SamplingParams,
    ) -> Result<Vec<Prediction>> {
        let empty = Vec::new();
        let prompts = points
            .iter()
            .map(|p| assemble_prompt(p, demos.get(&p.task).unwrap_or(&empty), config))
            .collect::<Result<Vec<_>>>()?;

        let outcomes: Vec<Result<Prediction>> = stream::iter(prompts.iter())
            .map(|prompt| self.estimate_probability(prompt, endpoint, params))
            .buffered(self.max_in_flight)
            .collect()
            .await;

        let mut first_endpoint_error = None;
        let mut endpoint_failures = 0;
        let mut out = Vec::with_capacity(outcomes.len());
        for (prompt, outcome) in prompts.iter().zip(outcomes) {
            match outcome {
                Ok(pred) => out.push(pred),
                Err(err) => {
                    if matches!(err, Error::Endpoint { .. }) {
                        endpoint_failures += 1;
                    }
                    log::warn!("{} on {}: {err}", endpoint.model_id, prompt.point_id);
                    out.push(Prediction::undecided(&prompt.point_id, endpoint, params, &err));
                    if first_endpoint_error.is_none() && matches!(err, Error::Endpoint { .. }) {
                        first_endpoint_error = Some(err);
                    }
                }
            }
        }
        if !out.is_empty() && endpoint_failures == out.len() {
            return Err(first_endpoint_error.expect("at least one endpoint failure"));
        }
        Ok(out)
    }
}

fn parse_response(value: &Value, model_id: &str) -> Result<RawResponse> {
    let protocol = |message: &str| Error::Protocol {
        model_id: model_id.to_string(),
        message: message.to_string(),
    };
    let choices = value
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("response has no `choices` array"))?;
    if choices.is_empty() {
        return Err(protocol("response has an empty `choices` array"));
    }
    let mut indexed = Vec::with_capacity(choices.len());
    for (pos, choice) in choices.iter().enumerate() {
        let index = choice.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| protocol("choice is missing `message.content`"))?
            .to_string();
        let first_token_logprobs = choice
            .pointer("/logprobs/content/0/top_logprobs")
            .and_then(Value::as_array)
            .map(|alts| {
                alts.iter()
                    .filter_map(|a| {
                        Some((
                            a.get("token")?.as_str()?.to_string(),
                            a.get("logprob")?.as_f64()?,
                        ))
                    })
                    .collect()
            });
        indexed.push((
            index,
            Completion {
                text,
                first_token_logprobs,
            },
        ));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(RawResponse {
        choices: indexed.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Turns a raw response into `(label, p_halluc)`.
pub fn score_response(response: &RawResponse, logprob_mode: bool, cot: bool) -> Result<(Label, f64)> {
    if logprob_mode {
        let first = response.choices.first().ok_or(Error::ProbabilityUnavailable)?;
        let alts = first
            .first_token_logprobs
            .as_deref()
            .ok_or(Error::ProbabilityUnavailable)?;
        let p = probability_from_logprobs(alts)?;
        let label = label_for(p, || parse_answer(&first.text, cot))?;
        Ok((label, p))
    } else {
        let parsed: Vec<Label> = response
            .choices
            .iter()
            .filter_map(|c| parse_answer(&c.text, cot).ok())
            .collect();
        if parsed.is_empty() {
            return Err(Error::Undecided(response.choices.len()));
        }
        let halluc = parsed.iter().filter(|&&l| l == Label::Hallucination).count();
        let p = halluc as f64 / parsed.len() as f64;
        let label = label_for(p, || Ok(parsed[0]))?;
        Ok((label, p))
    }
}

fn label_for(p: f64, at_half: impl FnOnce() -> Result<Label>) -> Result<Label> {
    if p > 0.5 {
        Ok(Label::Hallucination)
    } else if p < 0.5 {
        Ok(Label::NotHallucination)
    } else {
        at_half()
    }
}

/// Two-way softmax over the best-scoring "yes" and "no" spellings among the
/// first-token alternatives. Returns the probability of "no" (hallucination).
pub fn probability_from_logprobs(alternatives: &[(String, f64)]) -> Result<f64> {
    let mut lp_yes = f64::NEG_INFINITY;
    let mut lp_no = f64::NEG_INFINITY;
    for (token, lp) in alternatives {
        match normalize_token(token).as_str() {
            "yes" => lp_yes = lp_yes.max(*lp),
            "no" => lp_no = lp_no.max(*lp),
            _ => {}
        }
    }
    if lp_yes == f64::NEG_INFINITY && lp_no == f64::NEG_INFINITY {
        return Err(Error::ProbabilityUnavailable);
    }
    if lp_yes == f64::NEG_INFINITY {
        return Ok(1.0);
    }
    if lp_no == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 + (lp_yes - lp_no).exp()))
}

fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation() || c == 'Ġ' || c == '▁')
        .to_lowercase()
}

/// Reads a yes/no verdict. "yes" means the hypothesis is supported.
pub fn parse_answer(completion: &str, cot: bool) -> Result<Label> {
    let lower = completion.to_lowercase();
    let tail = if cot {
        match lower.rfind("answer:") {
            Some(i) => &lower[i + "answer:".len()..],
            None => return Err(Error::UnparseableAnswer(completion.to_string())),
        }
    } else {
        &lower[..]
    };
    let rest = tail.trim_start_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    let word_at = |w: &str| {
        rest.starts_with(w)
            && !rest[w.len()..]
                .chars()
                .next()
                .is_some_and(char::is_alphanumeric)
    };
    if word_at("yes") {
        Ok(Label::NotHallucination)
    } else if word_at("no") {
        Ok(Label::Hallucination)
    } else {
        Err(Error::UnparseableAnswer(completion.to_string()))
    }
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let len = line.len() + 1;
        if !line.trim().is_empty() {
            let pred = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: offset + e.column().saturating_sub(1),
                message: e.to_string(),
            })?;
            out.push(pred);
        }
        offset += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alts(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|(t, l)| (t.to_string(), *l)).collect()
    }

    #[test]
    fn parses_plain_answers() {
        assert_eq!(parse_answer("Yes", false).unwrap(), Label::NotHallucination);
        assert_eq!(parse_answer("  no.", false).unwrap(), Label::Hallucination);
        assert_eq!(parse_answer("\"NO\", because", false).unwrap(), Label::Hallucination);
        assert!(matches!(parse_answer("maybe", false), Err(Error::UnparseableAnswer(_))));
        assert!(parse_answer("nope", false).is_err());
        assert!(parse_answer("", false).is_err());
    }

    #[test]
    fn parses_cot_answers_after_last_cue() {
        let text = "The hypothesis adds a date. Answer: no is tempting but\nAnswer: yes";
        assert_eq!(parse_answer(text, true).unwrap(), Label::NotHallucination);
        assert!(parse_answer("I think yes", true).is_err());
    }

    #[test]
    fn softmax_over_yes_no() {
        let p = probability_from_logprobs(&alts(&[("yes", 0.9f64.ln()), ("no", 0.1f64.ln())])).unwrap();
        assert!((p - 0.1).abs() < 1e-12);
        let p = probability_from_logprobs(&alts(&[("Yes", -1.0), ("no", -1.0)])).unwrap();
        assert_eq!(p, 0.5);
        // best spelling wins
        let p = probability_from_logprobs(&alts(&[
            (" yes", -3.0),
            ("Yes", 0.5f64.ln()),
            ("No.", 0.5f64.ln()),
            ("maybe", -0.1),
        ]))
        .unwrap();
        assert_eq!(p, 0.5);
        assert!(matches!(
            probability_from_logprobs(&alts(&[("maybe", -0.1)])),
            Err(Error::ProbabilityUnavailable)
        ));
        assert_eq!(probability_from_logprobs(&alts(&[("no", -5.0)])).unwrap(), 1.0);
    }

    #[test]
    fn sampling_mode_counts_parsed_samples() {
        let texts = ["no", "no", "no", "yes", "yes", "yes", "yes", "yes", "yes", "yes", "hmm"];
        let resp = RawResponse {
            choices: texts
                .iter()
                .map(|t| Completion {
                    text: t.to_string(),
                    first_token_logprobs: None,
                })
                .collect(),
        };
        let (label, p) = score_response(&resp, false, false).unwrap();
        assert!((p - 0.3).abs() < 1e-15);
        assert_eq!(label, Label::NotHallucination);

        let junk = RawResponse {
            choices: vec![Completion {
                text: "unsure".into(),
                first_token_logprobs: None,
            }],
        };
        assert!(matches!(score_response(&junk, false, false), Err(Error::Undecided(1))));
    }

    #[test]
    fn half_probability_follows_text() {
        let resp = RawResponse {
            choices: vec![Completion {
                text: "no".into(),
                first_token_logprobs: Some(alts(&[("yes", -0.7), ("no", -0.7)])),
            }],
        };
        assert_eq!(score_response(&resp, true, false).unwrap(), (Label::Hallucination, 0.5));
    }

    #[test]
    fn params_validation() {
        assert!(SamplingParams::greedy("g").validate().is_ok());
        let mut p = SamplingParams::greedy("g");
        p.n_samples = 4;
        assert!(p.validate().is_err());
        p.logprob_mode = false;
        assert!(p.validate().is_ok());
        p.top_p = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn parses_openai_response_shape() {
        let body = json!({
            "choices": [
                {"index": 1, "message": {"role": "assistant", "content": "yes"}},
                {"index": 0, "message": {"role": "assistant", "content": "no"},
                 "logprobs": {"content": [{"token": "no", "logprob": -0.1,
                    "top_logprobs": [{"token": "no", "logprob": -0.1}, {"token": "yes", "logprob": -2.3}]}]}}
            ]
        });
        let resp = parse_response(&body, "m").unwrap();
        assert_eq!(resp.choices[0].text, "no");
        assert_eq!(resp.choices[0].first_token_logprobs.as_ref().unwrap().len(), 2);
        assert!(resp.choices[1].first_token_logprobs.is_none());
        assert!(matches!(
            parse_response(&json!({"choices": [{"message": {}}]}), "m"),
            Err(Error::Protocol { .. })
        ));
    }
}
