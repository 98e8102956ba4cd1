//! OpenAI-compatible HTTP backend.
//!
//! Wire contract (all requests `POST {base_url}/chat/completions`, JSON):
//!
//! Generation request fields: `model`, `messages`, `temperature` (0). A vision
//! request carries the user content as an array of a `text` part and an
//! `image_url` part whose URL is the remote URL or a base64 `data:` URL.
//! Required response field: `choices[0].message.content` (string).
//!
//! Scoring request: the same messages followed by an `assistant` message whose
//! content is the continuation, plus `add_generation_prompt: false`,
//! `continue_final_message: true`, `prompt_logprobs: 0`, `max_tokens: 1`.
//! Required response field: top-level `prompt_logprobs`, one entry per prompt
//! token, each `null` or an object with exactly one
//! `{token_id: {"logprob": f64, "decoded_token": string}}` member. The trailing
//! entries whose decoded text spells the continuation are the scored tokens.
//! Servers that omit `prompt_logprobs` cannot score and are rejected with
//! `ScoringUnsupported`.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, BackendSpec, GatewayError, PromptParts, ScoreValues, TokenScores};

const SCORING_HINT: &str = "serve the vision model behind an OpenAI-compatible server that \
    supports `prompt_logprobs` and `continue_final_message` on chat completions (e.g. vLLM)";

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn from_spec(spec: &BackendSpec) -> Result<Self, GatewayError> {
        let base = spec
            .base_url
            .as_deref()
            .ok_or_else(|| GatewayError::InvalidRequest("http backend without base_url".into()))?;
        let api_key = match &spec.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(k) if !k.is_empty() => Some(k),
                _ => {
                    log::warn!("environment variable {var} is not set; sending requests without a key");
                    None
                }
            },
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(spec.timeout.max(1)))
            .build()
            .map_err(|e| GatewayError::InvalidRequest(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            model: spec.model_id.clone(),
            api_key,
        })
    }

    async fn messages(&self, prompt: &PromptParts) -> Result<Vec<Value>, GatewayError> {
        let mut messages = Vec::with_capacity(3);
        if let Some(system) = &prompt.system_text {
            messages.push(json!({"role": "system", "content": system}));
        }
        let user = match &prompt.image {
            Some(image) => {
                let url = image.to_wire_url().await?;
                json!({"role": "user", "content": [
                    {"type": "text", "text": prompt.user_text},
                    {"type": "image_url", "image_url": {"url": url}},
                ]})
            }
            None => json!({"role": "user", "content": prompt.user_text}),
        };
        messages.push(user);
        Ok(messages)
    }

    async fn post(&self, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| GatewayError::unreachable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(GatewayError::RateLimited(format!("HTTP 429 from {}", self.endpoint)));
        }
        if status.is_server_error() {
            return Err(GatewayError::unreachable(format!(
                "HTTP {} from {}",
                status.as_u16(),
                self.endpoint
            )));
        }
        let text = resp
            .text()
            .await
            .map_err(|e| GatewayError::unreachable(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::InvalidResponse(e.to_string()))
    }
}

#[derive(Deserialize)]
struct PromptLogprob {
    logprob: f64,
    decoded_token: String,
}

/// Picks the trailing prompt tokens that spell `continuation`.
pub(crate) fn align_continuation(response: &Value, continuation: &str) -> Result<TokenScores, GatewayError> {
    let entries = match response.get("prompt_logprobs") {
        Some(Value::Array(a)) => a,
        _ => {
            return Err(GatewayError::ScoringUnsupported {
                reason: "response has no `prompt_logprobs`".into(),
                hint: SCORING_HINT.into(),
            })
        }
    };
    let mut picked: Vec<(String, f64)> = Vec::new();
    let mut covered = 0usize;
    for entry in entries.iter().rev() {
        if covered >= continuation.len() {
            break;
        }
        let obj = entry
            .as_object()
            .ok_or_else(|| GatewayError::InvalidResponse("continuation token without a log-probability".into()))?;
        if obj.len() != 1 {
            return Err(GatewayError::InvalidResponse(format!(
                "expected one prompt-logprob candidate per position, got {}",
                obj.len()
            )));
        }
        let lp: PromptLogprob = serde_json::from_value(obj.values().next().cloned().unwrap_or_default())
            .map_err(|e| GatewayError::InvalidResponse(e.to_string()))?;
        covered += lp.decoded_token.len();
        picked.push((lp.decoded_token, lp.logprob));
    }
    picked.reverse();
    let joined: String = picked.iter().map(|(t, _)| t.as_str()).collect();
    if !joined.ends_with(continuation) {
        return Err(GatewayError::InvalidResponse(
            "echoed prompt tokens do not end with the scored continuation".into(),
        ));
    }
    // The first picked token may straddle the prefix/continuation boundary.
    let excess = joined.len() - continuation.len();
    if excess > 0 {
        let first = &mut picked[0].0;
        if !first.is_char_boundary(excess) {
            return Err(GatewayError::InvalidResponse(
                "token boundary splits a character".into(),
            ));
        }
        *first = first[excess..].to_string();
    }
    let (tokens, logprobs): (Vec<String>, Vec<f64>) = picked.into_iter().unzip();
    Ok(TokenScores {
        tokens,
        values: ScoreValues::LogProbs(logprobs),
    })
}

#[async_trait]
impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.endpoint
    }

    async fn generate(&self, prompt: &PromptParts) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.model,
            "messages": self.messages(prompt).await?,
            "temperature": 0.0,
        });
        let resp = self.post(&body).await?;
        let content = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .unwrap_or("");
        if content.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(content.to_string())
    }

    async fn score(&self, prefix: &PromptParts, continuation: &str) -> Result<TokenScores, GatewayError> {
        let mut messages = self.messages(prefix).await?;
        messages.push(json!({"role": "assistant", "content": continuation}));
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": 0.0,
            "max_tokens": 1,
            "add_generation_prompt": false,
            "continue_final_message": true,
            "prompt_logprobs": 0,
        });
        let resp = self.post(&body).await?;
        align_continuation(&resp, continuation)
    }

    async fn probe_scoring(&self) -> Result<(), GatewayError> {
        self.score(&PromptParts::text("Reply with ok."), "ok").await.map(|_| ())
    }
}
