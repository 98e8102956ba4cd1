//! Uniform access to the vision-language model and the text-only model.
//!
//! Every model call goes through a [`Gateway`] handle. The handle owns one
//! [`Backend`] (OpenAI-compatible HTTP or the deterministic mock), bounds the
//! number of in-flight requests, checks request preconditions before dispatch
//! and retries transient failures with exponential backoff.
//!
//! Teacher-forced scoring returns per-token probabilities of a *given*
//! continuation. Backends may report log-probabilities or probabilities; the
//! conversion to probabilities happens here, once.

mod http;
mod image;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use self::http::HttpBackend;
pub use self::image::{ImageRef, ImageSource};
pub use self::mock::{
    mock_tokenize, FaultInjecting, HallucinationPlan, MockBackend, MockOptions, PlanBias, PlanRule, PlanTarget,
};

/// Default bound on concurrent requests per backend handle.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unreachable after {attempts} attempt(s): {reason}")]
    BackendUnreachable { attempts: u32, reason: String },
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("image could not be decoded: {0}")]
    ImageDecode(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("backend cannot score supplied text: {reason} (hint: {hint})")]
    ScoringUnsupported { reason: String, hint: String },
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
}

impl GatewayError {
    pub fn unreachable(reason: impl Into<String>) -> Self {
        GatewayError::BackendUnreachable {
            attempts: 1,
            reason: reason.into(),
        }
    }

    /// Whether the gateway may retry the request under the backoff policy.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::BackendUnreachable { .. } | GatewayError::RateLimited(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

fn default_timeout() -> u64 {
    120
}

fn default_max_retries() -> u32 {
    3
}

fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

fn default_backoff_ms() -> u64 {
    500
}

/// Connection settings for one model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model_id: String,
    /// Name of the environment variable holding the API key. Keys never live in config files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

impl BackendSpec {
    pub fn mock(seed: u64) -> Self {
        BackendSpec {
            kind: BackendKind::Mock,
            base_url: None,
            model_id: "mock".to_string(),
            api_key_env: None,
            timeout: default_timeout(),
            max_retries: default_max_retries(),
            seed: Some(seed),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retry_backoff_ms: default_backoff_ms(),
        }
    }

    pub fn http(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        BackendSpec {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            model_id: model_id.into(),
            api_key_env: None,
            timeout: default_timeout(),
            max_retries: default_max_retries(),
            seed: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retry_backoff_ms: default_backoff_ms(),
        }
    }

    /// Checks the kind-specific invariants; the message names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            BackendKind::Http => {
                if self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err("base_url is required for kind = \"http\"".into());
                }
                if self.model_id.trim().is_empty() {
                    return Err("model_id is required for kind = \"http\"".into());
                }
            }
            BackendKind::Mock => {
                if self.seed.is_none() {
                    return Err("seed is required for kind = \"mock\"".into());
                }
            }
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_backoff: Duration::from_millis(self.retry_backoff_ms),
            max_backoff: Duration::from_secs(30),
        }
    }
}

/// What a prompt is for. The HTTP backend ignores it; the mock uses it to pick a response template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Caption,
    VisualQuestion,
    InstructionGeneration,
    ObjectSummary,
    PositionSummary,
    FinalCaption,
    PrismAnswer,
    #[default]
    Other,
}

/// A single-turn prompt: optional system text, user text and at most one image.
///
/// `slots` records the named values the user text was rendered from. They are
/// provenance only and are never sent over the wire.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptParts {
    pub system_text: Option<String>,
    pub user_text: String,
    pub image: Option<ImageRef>,
    pub kind: PromptKind,
    pub slots: BTreeMap<String, String>,
}

impl PromptParts {
    pub fn text(user_text: impl Into<String>) -> Self {
        PromptParts {
            user_text: user_text.into(),
            ..Default::default()
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system_text = Some(system.into());
        self
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_kind(mut self, kind: PromptKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_slots(mut self, slots: BTreeMap<String, String>) -> Self {
        self.slots = slots;
        self
    }

    /// Same prompt with the image removed; everything else is identical.
    pub fn without_image(&self) -> Self {
        PromptParts {
            image: None,
            ..self.clone()
        }
    }
}

/// Probabilities of a supplied continuation, one per backend token.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub tokens: Vec<String>,
    pub probs: Vec<f64>,
}

/// Per-token values as reported by a backend.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreValues {
    LogProbs(Vec<f64>),
    Probs(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub tokens: Vec<String>,
    pub values: ScoreValues,
}

/// A model endpoint. Implementations perform exactly one attempt per call;
/// retries and concurrency limits belong to [`Gateway`].
#[async_trait]
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Single-turn generation. `prompt.image` is set for vision requests.
    async fn generate(&self, prompt: &PromptParts) -> Result<String, GatewayError>;

    /// Teacher-forced scoring of `continuation` after `prefix`. Never called with an empty continuation.
    async fn score(&self, prefix: &PromptParts, continuation: &str) -> Result<TokenScores, GatewayError>;

    /// Fails with [`GatewayError::ScoringUnsupported`] when the endpoint cannot echo prompt log-probabilities.
    async fn probe_scoring(&self) -> Result<(), GatewayError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(20)).unwrap_or(u32::MAX);
        self.base_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: default_max_retries(),
            base_backoff: Duration::from_millis(default_backoff_ms()),
            max_backoff: Duration::from_secs(30),
        }
    }
}

struct GatewayInner {
    backend: Arc<dyn Backend>,
    permits: Semaphore,
    retry: RetryPolicy,
}

/// Shareable handle to one backend. Cloning is cheap and shares the in-flight bound.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<GatewayInner>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.inner.backend.name())
            .field("retry", &self.inner.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, max_in_flight: usize, retry: RetryPolicy) -> Self {
        Gateway {
            inner: Arc::new(GatewayInner {
                backend,
                permits: Semaphore::new(max_in_flight.max(1)),
                retry,
            }),
        }
    }

    pub fn from_spec(spec: &BackendSpec) -> Result<Self, GatewayError> {
        spec.validate().map_err(GatewayError::InvalidRequest)?;
        let backend: Arc<dyn Backend> = match spec.kind {
            BackendKind::Http => Arc::new(HttpBackend::from_spec(spec)?),
            BackendKind::Mock => Arc::new(MockBackend::new(MockOptions::seeded(spec.seed.unwrap_or_default()))),
        };
        Ok(Gateway::new(backend, spec.max_in_flight, spec.retry_policy()))
    }

    pub fn backend_name(&self) -> &str {
        self.inner.backend.name()
    }

    /// Produces the initial caption for `image`.
    pub async fn generate_caption(&self, image: &ImageRef, instruction: &str) -> Result<String, GatewayError> {
        let prompt = vision_prompt(image, instruction, PromptKind::Caption)?;
        self.generate_with_retry(&prompt).await
    }

    /// Answers one follow-up instruction about `image`. The instruction is sent verbatim as user text.
    pub async fn answer_visual_question(&self, image: &ImageRef, instruction: &str) -> Result<String, GatewayError> {
        let prompt = vision_prompt(image, instruction, PromptKind::VisualQuestion)?;
        self.generate_with_retry(&prompt).await
    }

    /// Text-only generation; attaching an image is a precondition violation.
    pub async fn generate_text(&self, prompt: &PromptParts) -> Result<String, GatewayError> {
        if prompt.image.is_some() {
            return Err(GatewayError::InvalidRequest(
                "generate_text does not accept an image".into(),
            ));
        }
        check_user_text(&prompt.user_text)?;
        self.generate_with_retry(prompt).await
    }

    /// Teacher-forced probabilities of `continuation` given `prefix`.
    ///
    /// Whether the image is attached to `prefix` decides between the
    /// image-conditioned and the text-only distribution.
    pub async fn score_continuation(
        &self,
        prefix: &PromptParts,
        continuation: &str,
    ) -> Result<ScoredContinuation, GatewayError> {
        if continuation.is_empty() {
            return Ok(ScoredContinuation::default());
        }
        check_user_text(&prefix.user_text)?;
        let raw = self
            .with_retry(|| self.inner.backend.score(prefix, continuation))
            .await?;
        to_probabilities(raw, continuation)
    }

    pub async fn probe_scoring(&self) -> Result<(), GatewayError> {
        self.with_retry(|| self.inner.backend.probe_scoring()).await
    }

    async fn generate_with_retry(&self, prompt: &PromptParts) -> Result<String, GatewayError> {
        // An empty completion gets exactly one more attempt.
        let mut empty_seen = false;
        loop {
            let text = self.with_retry(|| self.inner.backend.generate(prompt)).await;
            match text {
                Ok(t) if !t.trim().is_empty() => return Ok(t),
                Ok(_) | Err(GatewayError::EmptyResponse) => {
                    if empty_seen {
                        return Err(GatewayError::EmptyResponse);
                    }
                    empty_seen = true;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn with_retry<T, F, Fut>(&self, mut call: F) -> Result<T, GatewayError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, GatewayError>>,
    {
        let policy = &self.inner.retry;
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self
                    .inner
                    .permits
                    .acquire()
                    .await
                    .map_err(|_| GatewayError::unreachable("gateway closed"))?;
                call().await
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt <= policy.max_retries => {
                    let delay = policy.backoff(attempt - 1);
                    log::debug!(
                        "{}: attempt {attempt} failed ({e}); retrying in {delay:?}",
                        self.inner.backend.name()
                    );
                    tokio::time::sleep(delay).await;
                }
                Err(e) if e.is_retryable() => {
                    let reason = match e {
                        GatewayError::BackendUnreachable { reason, .. } => reason,
                        other => other.to_string(),
                    };
                    return Err(GatewayError::BackendUnreachable {
                        attempts: attempt,
                        reason,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn check_user_text(text: &str) -> Result<(), GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::InvalidRequest("user text is empty".into()));
    }
    Ok(())
}

fn vision_prompt(image: &ImageRef, instruction: &str, kind: PromptKind) -> Result<PromptParts, GatewayError> {
    check_user_text(instruction)?;
    Ok(PromptParts::text(instruction).with_image(image.clone()).with_kind(kind))
}

fn to_probabilities(raw: TokenScores, continuation: &str) -> Result<ScoredContinuation, GatewayError> {
    let probs: Vec<f64> = match raw.values {
        ScoreValues::Probs(p) => p,
        ScoreValues::LogProbs(lp) => lp.into_iter().map(f64::exp).collect(),
    };
    if probs.len() != raw.tokens.len() {
        return Err(GatewayError::InvalidResponse(format!(
            "{} tokens but {} scores",
            raw.tokens.len(),
            probs.len()
        )));
    }
    if raw.tokens.concat() != continuation {
        return Err(GatewayError::InvalidResponse(
            "token pieces do not reproduce the scored text".into(),
        ));
    }
    let mut checked = Vec::with_capacity(probs.len());
    for p in probs {
        if p.is_nan() || !(0.0..=1.0 + 1e-9).contains(&p) {
            return Err(GatewayError::InvalidResponse(format!("probability {p} outside (0, 1]")));
        }
        // exp() of a very negative logprob underflows to 0; keep the value inside (0, 1].
        checked.push(p.clamp(f64::MIN_POSITIVE, 1.0));
    }
    Ok(ScoredContinuation {
        tokens: raw.tokens,
        probs: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fast_retry(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            base_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(4),
        }
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        error: GatewayError,
    }

    #[async_trait]
    impl Backend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        async fn generate(&self, _prompt: &PromptParts) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(self.error.clone())
            } else {
                Ok("fine".into())
            }
        }
        async fn score(&self, _prefix: &PromptParts, continuation: &str) -> Result<TokenScores, GatewayError> {
            Ok(TokenScores {
                tokens: vec![continuation.to_string()],
                values: ScoreValues::LogProbs(vec![-0.5]),
            })
        }
    }

    fn flaky(fail_first: usize, error: GatewayError) -> Arc<Flaky> {
        Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first,
            error,
        })
    }

    #[test]
    fn spec_validation() {
        assert!(BackendSpec::mock(7).validate().is_ok());
        let mut m = BackendSpec::mock(7);
        m.seed = None;
        assert!(m.validate().unwrap_err().contains("seed"));
        assert!(BackendSpec::http("http://x", "m").validate().is_ok());
        assert!(BackendSpec::http("", "m").validate().unwrap_err().contains("base_url"));
        assert!(BackendSpec::http("http://x", " ")
            .validate()
            .unwrap_err()
            .contains("model_id"));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(350),
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(350));
        assert_eq!(p.backoff(40), Duration::from_millis(350));
    }

    #[tokio::test]
    async fn transient_failures_are_retried() {
        let b = flaky(2, GatewayError::unreachable("down"));
        let gw = Gateway::new(b.clone(), 2, fast_retry(3));
        let out = gw.generate_text(&PromptParts::text("hi")).await.unwrap();
        assert_eq!(out, "fine");
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn retries_exhaust_into_unreachable() {
        let b = flaky(usize::MAX, GatewayError::RateLimited("429".into()));
        let gw = Gateway::new(b.clone(), 2, fast_retry(2));
        let err = gw.generate_text(&PromptParts::text("hi")).await.unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnreachable { attempts: 3, .. }));
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn empty_response_retried_once_then_fatal() {
        let b = flaky(usize::MAX, GatewayError::EmptyResponse);
        let gw = Gateway::new(b.clone(), 2, fast_retry(5));
        let err = gw.generate_text(&PromptParts::text("hi")).await.unwrap_err();
        assert_eq!(err, GatewayError::EmptyResponse);
        assert_eq!(b.calls.load(Ordering::SeqCst), 2);

        let b = flaky(1, GatewayError::EmptyResponse);
        let gw = Gateway::new(b.clone(), 2, fast_retry(0));
        assert_eq!(gw.generate_text(&PromptParts::text("hi")).await.unwrap(), "fine");
    }

    #[tokio::test]
    async fn non_retryable_errors_return_immediately() {
        let b = flaky(usize::MAX, GatewayError::ImageDecode("bad".into()));
        let gw = Gateway::new(b.clone(), 2, fast_retry(5));
        let err = gw.generate_text(&PromptParts::text("hi")).await.unwrap_err();
        assert!(matches!(err, GatewayError::ImageDecode(_)));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn preconditions_rejected_before_dispatch() {
        let b = flaky(0, GatewayError::EmptyResponse);
        let gw = Gateway::new(b.clone(), 2, fast_retry(0));
        let img = ImageRef::parse("img-1");
        assert!(matches!(
            gw.generate_caption(&img, "").await,
            Err(GatewayError::InvalidRequest(_))
        ));
        assert!(matches!(
            gw.answer_visual_question(&img, "  ").await,
            Err(GatewayError::InvalidRequest(_))
        ));
        let with_image = PromptParts::text("summarize").with_image(img);
        assert!(matches!(
            gw.generate_text(&with_image).await,
            Err(GatewayError::InvalidRequest(_))
        ));
        assert_eq!(b.calls.load(Ordering::SeqCst), 0);
    }

    #[tokio::test]
    async fn empty_continuation_scores_to_nothing() {
        let b = flaky(0, GatewayError::EmptyResponse);
        let gw = Gateway::new(b, 2, fast_retry(0));
        let s = gw.score_continuation(&PromptParts::text("T"), "").await.unwrap();
        assert!(s.tokens.is_empty() && s.probs.is_empty());
    }

    #[tokio::test]
    async fn logprobs_converted_once() {
        let b = flaky(0, GatewayError::EmptyResponse);
        let gw = Gateway::new(b, 2, fast_retry(0));
        let s = gw.score_continuation(&PromptParts::text("T"), "word").await.unwrap();
        assert_eq!(s.tokens, vec!["word".to_string()]);
        assert_eq!(s.probs, vec![(-0.5f64).exp()]);
    }

    #[test]
    fn probability_conversion_guards() {
        let bad_len = TokenScores {
            tokens: vec!["a".into()],
            values: ScoreValues::Probs(vec![]),
        };
        assert!(to_probabilities(bad_len, "a").is_err());
        let bad_concat = TokenScores {
            tokens: vec!["a".into()],
            values: ScoreValues::Probs(vec![0.5]),
        };
        assert!(to_probabilities(bad_concat, "b").is_err());
        let underflow = TokenScores {
            tokens: vec!["a".into()],
            values: ScoreValues::LogProbs(vec![f64::NEG_INFINITY]),
        };
        let s = to_probabilities(underflow, "a").unwrap();
        assert!(s.probs[0] > 0.0);
    }
}
