//! Deterministic seeded backend for tests and dry runs.
//!
//! Every response is a pure function of the seed and the request content.
//! Hashing is SHA-256 over a length-prefixed field encoding:
//!
//! ```text
//! digest = SHA256("groundcap-mock/v1" || seed.to_le_bytes() || for each field: len(u64 LE) || bytes)
//! ```
//!
//! - caption for image id `i`: fields `["caption", i]`; with `h` the first 8 digest
//!   bytes (big-endian), `a = h % 10`, `b = (a + 1 + (h >> 32) % 9) % 10`,
//!   text `"A scene containing object-{a} and object-{b}."`
//! - token probability at position `t`: fields `["score", token, t as u64 LE, [has_image]]`;
//!   with `u` the first 4 digest bytes (big-endian), `p = 0.05 + 0.9 * u / 2^32`
//! - visual answers: fields `["answer", image id, instruction]`, phrase banks indexed by digest bytes
//! - summaries: the detail lines joined after a header, sentences cut to 12 words;
//!   the golden text when there are no details
//!
//! A [`HallucinationPlan`] overrides token probabilities so tests can build
//! sentences with known contrastive ratings.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use sha2::{Digest, Sha256};

use super::{Backend, GatewayError, PromptKind, PromptParts, ScoreValues, TokenScores};
use crate::qa::INSTRUCTION_STEM;
use crate::rater::lexicon;
use crate::text::normalize_whitespace;

const DOMAIN: &[u8] = b"groundcap-mock/v1";
const MAX_WORD_PIECE: usize = 6;

pub(crate) fn digest(seed: u64, fields: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(seed.to_le_bytes());
    for f in fields {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f);
    }
    h.finalize().into()
}

fn head_u64(d: &[u8; 32]) -> u64 {
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

fn head_u32(d: &[u8; 32]) -> u32 {
    u32::from_be_bytes(d[..4].try_into().expect("4 bytes"))
}

/// Which tokens a [`PlanRule`] overrides.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanTarget {
    /// Every token of a whitespace-delimited word, compared case-insensitively after trimming punctuation.
    Word(String),
    /// Every token of the 0-based sentence (split after `.`, `!`, `?` followed by whitespace or end).
    Sentence(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRule {
    pub target: PlanTarget,
    pub p_with: f64,
    pub p_without: f64,
}

/// How tokens not covered by any rule are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlanBias {
    /// Plain hash rule.
    #[default]
    Hashed,
    /// Hash rule, but the larger of the two hashed values is always the image-conditioned one.
    Grounded,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HallucinationPlan {
    /// First matching rule wins.
    pub rules: Vec<PlanRule>,
    pub bias: PlanBias,
}

impl HallucinationPlan {
    pub fn force_word(mut self, word: &str, p_with: f64, p_without: f64) -> Self {
        self.rules.push(PlanRule {
            target: PlanTarget::Word(word.to_lowercase()),
            p_with,
            p_without,
        });
        self
    }

    pub fn force_sentence(mut self, index: usize, p_with: f64, p_without: f64) -> Self {
        self.rules.push(PlanRule {
            target: PlanTarget::Sentence(index),
            p_with,
            p_without,
        });
        self
    }

    pub fn grounded(mut self) -> Self {
        self.bias = PlanBias::Grounded;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockOptions {
    pub seed: u64,
    /// Ignore the image when scoring, so both conditions yield identical probabilities.
    pub image_blind: bool,
    pub plan: HallucinationPlan,
    /// Artificial per-call latency, for concurrency tests.
    pub latency: Option<Duration>,
}

impl MockOptions {
    pub fn seeded(seed: u64) -> Self {
        MockOptions {
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub struct MockBackend {
    opts: MockOptions,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(opts: MockOptions) -> Self {
        MockBackend {
            opts,
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(MockOptions::seeded(seed))
    }

    pub fn options(&self) -> &MockOptions {
        &self.opts
    }

    /// Highest number of concurrent calls observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    async fn enter(&self) -> InFlight<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.opts.latency {
            tokio::time::sleep(d).await;
        }
        InFlight(&self.in_flight)
    }

    /// The caption the mock returns for an image id.
    pub fn caption_for(&self, image_id: &str) -> String {
        let h = head_u64(&digest(self.opts.seed, &[b"caption", image_id.as_bytes()]));
        let a = h % 10;
        let b = (a + 1 + (h >> 32) % 9) % 10;
        format!("A scene containing object-{a} and object-{b}.")
    }

    /// Hash-rule probability for `token` at position `t`.
    pub fn hashed_prob(&self, token: &str, t: usize, has_image: bool) -> f64 {
        let d = digest(
            self.opts.seed,
            &[
                b"score",
                token.as_bytes(),
                &(t as u64).to_le_bytes(),
                &[has_image as u8],
            ],
        );
        0.05 + 0.9 * (head_u32(&d) as f64 / 4_294_967_296.0)
    }

    fn token_probs(&self, tokens: &[String], has_image: bool) -> Vec<f64> {
        let has_image = has_image && !self.opts.image_blind;
        let words = token_words(tokens);
        let sentences = token_sentences(tokens);
        tokens
            .iter()
            .enumerate()
            .map(|(t, tok)| {
                let rule = self.opts.plan.rules.iter().find(|r| match &r.target {
                    PlanTarget::Word(w) => words[t].as_deref() == Some(w.as_str()),
                    PlanTarget::Sentence(k) => sentences[t] == *k,
                });
                if let Some(r) = rule {
                    return if has_image { r.p_with } else { r.p_without };
                }
                match self.opts.plan.bias {
                    PlanBias::Hashed => self.hashed_prob(tok, t, has_image),
                    PlanBias::Grounded => {
                        let with = self.hashed_prob(tok, t, true);
                        let without = self.hashed_prob(tok, t, false);
                        if has_image {
                            with.max(without)
                        } else {
                            with.min(without)
                        }
                    }
                }
            })
            .collect()
    }

    fn answer(&self, image_id: &str, instruction: &str) -> String {
        let d = digest(
            self.opts.seed,
            &[b"answer", image_id.as_bytes(), instruction.as_bytes()],
        );
        let pick = |i: usize, bank: &[&'static str]| -> &'static str {
            let v = u16::from_be_bytes([d[2 * i], d[2 * i + 1]]) as usize;
            bank[v % bank.len()]
        };
        let (object, is_position) = instruction_target(instruction);
        if is_position {
            format!(
                "The {object} is located {} of the frame. It sits {} another object. The {object} is {} the camera.",
                pick(0, &LOCATIONS),
                pick(1, &RELATIONS),
                pick(2, &DISTANCES),
            )
        } else {
            format!(
                "The {object} is {} and {}. Its surface looks {}. The {object} appears {}.",
                pick(0, &COLORS),
                pick(1, &SIZES),
                pick(2, &TEXTURES),
                pick(3, &STATES),
            )
        }
    }

    fn text_response(&self, prompt: &PromptParts) -> String {
        let slot = |name: &str| prompt.slots.get(name).map(String::as_str).unwrap_or("");
        match prompt.kind {
            PromptKind::InstructionGeneration => {
                let sentence = if prompt.slots.contains_key("sentence") {
                    slot("sentence")
                } else {
                    prompt.user_text.as_str()
                };
                let nouns = extract_nouns(sentence);
                if nouns.is_empty() {
                    "There are no objects to ask about.".to_string()
                } else {
                    nouns
                        .iter()
                        .map(|n| format!("{INSTRUCTION_STEM} the {n}."))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
            }
            PromptKind::ObjectSummary => summary("Object details:", slot("golden"), slot("details")),
            PromptKind::PositionSummary => summary("Position details:", slot("golden"), slot("details")),
            PromptKind::FinalCaption => {
                let golden = normalize_whitespace(slot("golden"));
                let mut parts = vec![golden.clone()];
                for key in ["c_o", "c_p"] {
                    let body = strip_header(slot(key));
                    if !body.is_empty() && body != golden {
                        parts.push(body);
                    }
                }
                normalize_whitespace(&parts.join(" "))
            }
            PromptKind::PrismAnswer => prism(slot("caption"), slot("question")),
            _ => {
                let d = digest(self.opts.seed, &[b"text", prompt.user_text.as_bytes()]);
                format!("Mock response {:016x}.", head_u64(&d))
            }
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    async fn generate(&self, prompt: &PromptParts) -> Result<String, GatewayError> {
        let _guard = self.enter().await;
        match (&prompt.image, prompt.kind) {
            (Some(image), kind) => {
                image.decode_inline()?;
                let id = image.identity();
                if kind == PromptKind::Caption {
                    Ok(self.caption_for(&id))
                } else {
                    Ok(self.answer(&id, &prompt.user_text))
                }
            }
            (None, PromptKind::Caption | PromptKind::VisualQuestion) => {
                Err(GatewayError::InvalidRequest("vision request without an image".into()))
            }
            (None, _) => Ok(self.text_response(prompt)),
        }
    }

    async fn score(&self, prefix: &PromptParts, continuation: &str) -> Result<TokenScores, GatewayError> {
        let _guard = self.enter().await;
        if let Some(image) = &prefix.image {
            image.decode_inline()?;
        }
        let tokens = mock_tokenize(continuation);
        let probs = self.token_probs(&tokens, prefix.image.is_some());
        Ok(TokenScores {
            tokens,
            values: ScoreValues::Probs(probs),
        })
    }
}

/// Splits text into pieces the way the mock "tokenizer" does: optional leading
/// whitespace, then either up to six alphanumeric characters or one other
/// character. A trailing whitespace run becomes its own piece. Pieces
/// concatenate back to the input.
pub fn mock_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(start, _)) = chars.peek() {
        while chars.peek().is_some_and(|(_, c)| c.is_whitespace()) {
            chars.next();
        }
        match chars.peek().copied() {
            None => {}
            Some((_, c)) if c.is_alphanumeric() => {
                let mut n = 0;
                while n < MAX_WORD_PIECE && chars.peek().is_some_and(|(_, c)| c.is_alphanumeric()) {
                    chars.next();
                    n += 1;
                }
            }
            Some(_) => {
                chars.next();
            }
        }
        let end = chars.peek().map_or(text.len(), |&(i, _)| i);
        out.push(text[start..end].to_string());
    }
    out
}

/// Lower-cased, punctuation-trimmed word each token belongs to (`None` for whitespace-only tokens).
fn token_words(tokens: &[String]) -> Vec<Option<String>> {
    let text: String = tokens.concat();
    let mut word_at = vec![None; text.len()];
    let mut pos = 0;
    for piece in text.split_inclusive(char::is_whitespace) {
        let word = piece.trim_end();
        let key = trim_word(word).to_lowercase();
        for slot in &mut word_at[pos..pos + word.len()] {
            *slot = Some(key.clone());
        }
        pos += piece.len();
    }
    let mut offset = 0;
    tokens
        .iter()
        .map(|tok| {
            let lead = tok.len() - tok.trim_start().len();
            let start = offset + lead;
            offset += tok.len();
            if start < offset {
                word_at[start].clone()
            } else {
                None
            }
        })
        .collect()
}

fn token_sentences(tokens: &[String]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut k = 0;
    for (i, tok) in tokens.iter().enumerate() {
        out.push(k);
        let ends = matches!(tok.trim_start(), "." | "!" | "?");
        let next_breaks = tokens.get(i + 1).is_none_or(|n| n.starts_with(char::is_whitespace));
        if ends && next_breaks {
            k += 1;
        }
    }
    out
}

fn trim_word(word: &str) -> &str {
    word.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Words that may open a noun phrase for the mock's object extractor.
const INTRODUCERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "several", "many", "few", "another", "each", "every",
    "its", "his", "her", "their", "our", "my", "your", "and", "or", "of", "with", "on", "in", "near", "under",
    "beside", "behind", "above", "below", "at", "by", "from", "into", "onto", "over", "across",
];

/// Mock object extraction: split into whitespace words; a maximal run of
/// non-function words that is directly preceded by an introducer
/// (article, determiner, possessive, common preposition, `and`, `or`)
/// contributes its last word. Punctuation attached to a word ends its run.
/// Results are lower-cased and deduplicated in order of appearance.
pub(crate) fn extract_nouns(sentence: &str) -> Vec<String> {
    let mut nouns: Vec<String> = Vec::new();
    let mut introduced = false;
    let mut run_last: Option<String> = None;
    let flush = |run_last: &mut Option<String>, nouns: &mut Vec<String>, introduced: bool| {
        if let Some(w) = run_last.take() {
            if introduced && !nouns.contains(&w) {
                nouns.push(w);
            }
        }
    };
    for raw in sentence.split_whitespace() {
        let word = trim_word(raw).to_lowercase();
        let ends_run = raw.ends_with(|c: char| !c.is_alphanumeric());
        if word.is_empty() {
            flush(&mut run_last, &mut nouns, introduced);
            introduced = false;
            continue;
        }
        if lexicon::is_function_word(&word) {
            flush(&mut run_last, &mut nouns, introduced);
            introduced = INTRODUCERS.contains(&word.as_str());
            continue;
        }
        run_last = Some(word);
        if ends_run {
            flush(&mut run_last, &mut nouns, introduced);
            introduced = false;
        }
    }
    flush(&mut run_last, &mut nouns, introduced);
    nouns
}

/// Object phrase of a follow-up instruction and whether it asks about position.
fn instruction_target(instruction: &str) -> (String, bool) {
    let Some(idx) = instruction.find(INSTRUCTION_STEM) else {
        return ("scene".to_string(), false);
    };
    let rest = instruction[idx + INSTRUCTION_STEM.len()..].trim();
    let (rest, is_position) = match rest.strip_prefix("the position of") {
        Some(r) => (r.trim(), true),
        None => (rest, false),
    };
    let rest = rest.strip_prefix("the ").unwrap_or(rest);
    let object = rest
        .lines()
        .next()
        .unwrap_or("")
        .trim_end_matches(|c: char| !c.is_alphanumeric())
        .trim();
    let object = if object.is_empty() { "scene" } else { object };
    (object.to_string(), is_position)
}

fn strip_header(text: &str) -> String {
    let t = text.trim();
    let t = t
        .strip_prefix("Object details:")
        .or_else(|| t.strip_prefix("Position details:"))
        .unwrap_or(t);
    normalize_whitespace(t)
}

/// Longer sentences are cut to this many words, so merged summaries shrink.
const SUMMARY_SENTENCE_WORDS: usize = 12;

fn clip_sentences(text: &str) -> String {
    text.split_inclusive(['.', '!', '?'])
        .map(|s| {
            let words: Vec<&str> = s.split_whitespace().collect();
            if words.len() <= SUMMARY_SENTENCE_WORDS {
                words.join(" ")
            } else {
                let kept = words[..SUMMARY_SENTENCE_WORDS].join(" ");
                format!("{}.", kept.trim_end_matches(|c: char| !c.is_alphanumeric()))
            }
        })
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn summary(header: &str, golden: &str, details: &str) -> String {
    let body: Vec<String> = details
        .lines()
        .map(|l| l.trim().trim_start_matches("- "))
        .map(strip_header)
        .filter(|l| !l.is_empty())
        .map(|l| clip_sentences(&l))
        .collect();
    let body = if body.is_empty() {
        normalize_whitespace(golden)
    } else {
        body.join(" ")
    };
    normalize_whitespace(&format!("{header} {body}"))
}

fn prism(caption: &str, question: &str) -> String {
    let q_words: Vec<String> = question
        .split_whitespace()
        .map(|w| trim_word(w).to_lowercase())
        .filter(|w| !w.is_empty() && !lexicon::is_function_word(w))
        .collect();
    let mut best: Option<(usize, &str)> = None;
    for sentence in caption.split_inclusive(['.', '!', '?']) {
        let s = sentence.trim();
        if s.is_empty() {
            continue;
        }
        let overlap = s
            .split_whitespace()
            .map(|w| trim_word(w).to_lowercase())
            .filter(|w| q_words.contains(w))
            .count();
        if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
            best = Some((overlap, s));
        }
    }
    match best {
        Some((_, s)) => format!("According to the caption: {s}"),
        None => "The caption does not say.".to_string(),
    }
}

const COLORS: [&str; 8] = ["red", "blue", "green", "white", "black", "gray", "brown", "yellow"];
const SIZES: [&str; 6] = ["small", "large", "medium-sized", "tall", "compact", "wide"];
const TEXTURES: [&str; 6] = ["smooth", "rough", "glossy", "matte", "textured", "weathered"];
const STATES: [&str; 5] = [
    "well lit",
    "partly shaded",
    "slightly blurred",
    "sharply focused",
    "clearly outlined",
];
const LOCATIONS: [&str; 6] = [
    "in the upper left",
    "in the upper right",
    "near the center",
    "in the lower left",
    "in the lower right",
    "along the bottom edge",
];
const RELATIONS: [&str; 5] = ["next to", "behind", "in front of", "above", "below"];
const DISTANCES: [&str; 3] = ["close to", "far from", "at a moderate distance from"];

type FaultPredicate = Box<dyn Fn(&PromptParts) -> bool + Send + Sync>;

/// Wraps a backend and injects `BackendUnreachable` failures.
pub struct FaultInjecting {
    inner: Arc<dyn Backend>,
    fail_first: usize,
    predicate: Option<FaultPredicate>,
    calls: AtomicUsize,
    failures: AtomicUsize,
}

impl FaultInjecting {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        FaultInjecting {
            inner,
            fail_first: 0,
            predicate: None,
            calls: AtomicUsize::new(0),
            failures: AtomicUsize::new(0),
        }
    }

    /// Fail the first `n` calls, whatever they are.
    pub fn fail_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    /// Fail every call whose prompt matches.
    pub fn fail_when(mut self, pred: impl Fn(&PromptParts) -> bool + Send + Sync + 'static) -> Self {
        self.predicate = Some(Box::new(pred));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn failures(&self) -> usize {
        self.failures.load(Ordering::SeqCst)
    }

    fn check(&self, prompt: &PromptParts) -> Result<(), GatewayError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let hit = n < self.fail_first || self.predicate.as_ref().is_some_and(|p| p(prompt));
        if hit {
            self.failures.fetch_add(1, Ordering::SeqCst);
            return Err(GatewayError::unreachable("injected fault"));
        }
        Ok(())
    }
}

#[async_trait]
impl Backend for FaultInjecting {
    fn name(&self) -> &str {
        "fault-injecting"
    }

    async fn generate(&self, prompt: &PromptParts) -> Result<String, GatewayError> {
        self.check(prompt)?;
        self.inner.generate(prompt).await
    }

    async fn score(&self, prefix: &PromptParts, continuation: &str) -> Result<TokenScores, GatewayError> {
        self.check(prefix)?;
        self.inner.score(prefix, continuation).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, ImageRef, RetryPolicy};
    use crate::prompts::slot_map as slots;
    use proptest::prelude::*;

    // Independent re-derivation of the hash rule with sha2 directly.
    fn oracle_digest(seed: u64, fields: &[&[u8]]) -> Vec<u8> {
        let mut buf = b"groundcap-mock/v1".to_vec();
        buf.extend_from_slice(&seed.to_le_bytes());
        for f in fields {
            buf.extend_from_slice(&(f.len() as u64).to_le_bytes());
            buf.extend_from_slice(f);
        }
        Sha256::digest(&buf).to_vec()
    }

    fn oracle_prob(seed: u64, token: &str, t: u64, has_image: bool) -> f64 {
        let d = oracle_digest(
            seed,
            &[b"score", token.as_bytes(), &t.to_le_bytes(), &[has_image as u8]],
        );
        let u = ((d[0] as u64) << 24) | ((d[1] as u64) << 16) | ((d[2] as u64) << 8) | d[3] as u64;
        0.05 + 0.9 * (u as f64 / 2f64.powi(32))
    }

    fn gateway(opts: MockOptions) -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(opts)), 8, RetryPolicy::default())
    }

    #[tokio::test]
    async fn caption_matches_hash_oracle() {
        let gw = gateway(MockOptions::seeded(7));
        let cap = gw
            .generate_caption(&ImageRef::parse("img-1"), "Describe this image in detail.")
            .await
            .unwrap();
        let d = oracle_digest(7, &[b"caption", b"img-1"]);
        let h = d[..8].iter().fold(0u64, |acc, b| (acc << 8) | *b as u64);
        let a = h % 10;
        let b = (a + 1 + (h >> 32) % 9) % 10;
        assert_eq!(cap, format!("A scene containing object-{a} and object-{b}."));
        assert_eq!(cap, "A scene containing object-9 and object-2.");
    }

    #[tokio::test]
    async fn scoring_matches_hash_oracle() {
        let gw = gateway(MockOptions::seeded(7));
        let prefix = PromptParts::text("Describe this image in detail.");
        let s = gw.score_continuation(&prefix, "a red car").await.unwrap();
        assert_eq!(s.tokens, vec!["a", " red", " car"]);
        for (t, (tok, p)) in s.tokens.iter().zip(&s.probs).enumerate() {
            assert_eq!(*p, oracle_prob(7, tok, t as u64, false));
        }
        let with = gw
            .score_continuation(&prefix.clone().with_image(ImageRef::parse("img-1")), "a red car")
            .await
            .unwrap();
        assert_eq!(with.tokens, s.tokens);
        assert_ne!(with.probs, s.probs);
        for (t, (tok, p)) in with.tokens.iter().zip(&with.probs).enumerate() {
            assert_eq!(*p, oracle_prob(7, tok, t as u64, true));
        }
    }

    #[tokio::test]
    async fn answers_are_deterministic_and_keyed() {
        let gw = gateway(MockOptions::seeded(7));
        let img = ImageRef::parse("img-1");
        let q = "Describe more details about the airplane.";
        let a1 = gw.answer_visual_question(&img, q).await.unwrap();
        let a2 = gw.answer_visual_question(&img, q).await.unwrap();
        assert_eq!(a1, a2);
        assert!(a1.starts_with("The airplane is "));
        assert_eq!(a1.matches(". ").count() + 1, 3);
        let other = gateway(MockOptions::seeded(8))
            .answer_visual_question(&img, q)
            .await
            .unwrap();
        let pos = gw
            .answer_visual_question(&img, "Describe more details about the position of the airplane.")
            .await
            .unwrap();
        assert!(pos.contains("located"));
        assert!(a1 != other || a1 != pos);
    }

    #[tokio::test]
    async fn instruction_generation_one_line_per_noun() {
        let gw = gateway(MockOptions::seeded(7));
        let prompt = PromptParts::text("raise questions")
            .with_kind(PromptKind::InstructionGeneration)
            .with_slots(slots([("sentence", "An airplane is parked.")]));
        assert_eq!(
            gw.generate_text(&prompt).await.unwrap(),
            "Describe more details about the airplane."
        );
        let prompt = prompt.with_slots(slots([("sentence", "A dog and a ball.")]));
        assert_eq!(
            gw.generate_text(&prompt).await.unwrap(),
            "Describe more details about the dog.\nDescribe more details about the ball."
        );
    }

    #[test]
    fn noun_rule_by_hand() {
        assert_eq!(
            extract_nouns("A scene containing object-3 and object-5."),
            ["object-3", "object-5"]
        );
        assert_eq!(extract_nouns("a red car parked near a tree"), ["parked", "tree"]);
        assert_eq!(extract_nouns("It is raining."), Vec::<String>::new());
        assert_eq!(extract_nouns("The dog, the dog."), ["dog"]);
    }

    #[tokio::test]
    async fn summary_templates() {
        let gw = gateway(MockOptions::seeded(7));
        let p = PromptParts::text("summarize")
            .with_kind(PromptKind::ObjectSummary)
            .with_slots(slots([("golden", "A dog."), ("details", "")]));
        assert_eq!(gw.generate_text(&p).await.unwrap(), "Object details: A dog.");
        let p = p.with_slots(slots([("golden", "A dog."), ("details", "- It is brown.\n- It runs.")]));
        assert_eq!(
            gw.generate_text(&p).await.unwrap(),
            "Object details: It is brown. It runs."
        );
        let p = PromptParts::text("compose")
            .with_kind(PromptKind::FinalCaption)
            .with_slots(slots([
                ("golden", "A dog."),
                ("c_o", "Object details: It is brown."),
                ("c_p", "Position details: A dog."),
            ]));
        assert_eq!(gw.generate_text(&p).await.unwrap(), "A dog. It is brown.");
    }

    #[tokio::test]
    async fn plan_overrides_and_blind_mode() {
        let plan = HallucinationPlan::default().force_word("beach", 0.2, 0.9);
        let gw = gateway(MockOptions {
            seed: 7,
            plan,
            ..Default::default()
        });
        let prefix = PromptParts::text("T");
        let img = prefix.clone().with_image(ImageRef::parse("i"));
        let w = gw.score_continuation(&img, "On the beach.").await.unwrap();
        let wo = gw.score_continuation(&prefix, "On the beach.").await.unwrap();
        let i = w.tokens.iter().position(|t| t == " beach").unwrap();
        assert_eq!((w.probs[i], wo.probs[i]), (0.2, 0.9));

        let blind = gateway(MockOptions {
            seed: 7,
            image_blind: true,
            ..Default::default()
        });
        let a = blind.score_continuation(&img, "On the beach.").await.unwrap();
        let b = blind.score_continuation(&prefix, "On the beach.").await.unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sentence_targets_follow_terminators() {
        let toks = mock_tokenize("It is 3.5 m. Next one! Last");
        let s = token_sentences(&toks);
        let last = *s.last().unwrap();
        assert_eq!(last, 2);
        let five = toks.iter().position(|t| t == "5").unwrap();
        assert_eq!(s[five], 0);
    }

    #[test]
    fn long_words_split_into_pieces() {
        assert_eq!(mock_tokenize("An airplane."), vec!["An", " airpla", "ne", "."]);
        assert_eq!(mock_tokenize("  x  "), vec!["  x", "  "]);
        assert!(mock_tokenize("").is_empty());
    }

    #[tokio::test]
    async fn inline_garbage_fails_to_decode() {
        let gw = gateway(MockOptions::seeded(7));
        let err = gw
            .generate_caption(&ImageRef::parse("data:image/png;base64,@@@"), "Describe.")
            .await
            .unwrap_err();
        assert!(matches!(err, GatewayError::ImageDecode(_)));
    }

    #[tokio::test]
    async fn retried_request_matches_first_attempt() {
        let mock: Arc<dyn Backend> = Arc::new(MockBackend::seeded(7));
        let clean = Gateway::new(mock.clone(), 4, RetryPolicy::default());
        let faulty = Gateway::new(
            Arc::new(FaultInjecting::new(mock).fail_first(2)),
            4,
            RetryPolicy {
                max_retries: 3,
                base_backoff: Duration::from_millis(1),
                max_backoff: Duration::from_millis(2),
            },
        );
        let img = ImageRef::parse("img-1");
        assert_eq!(
            clean.generate_caption(&img, "Describe.").await.unwrap(),
            faulty.generate_caption(&img, "Describe.").await.unwrap()
        );
    }

    proptest! {
        #[test]
        fn tokens_concatenate_to_input(text in "\\PC{0,60}") {
            prop_assert_eq!(mock_tokenize(&text).concat(), text);
        }

        #[test]
        fn probabilities_in_open_unit_interval(token in "\\PC{1,8}", t in 0usize..64, img in any::<bool>()) {
            let p = MockBackend::seeded(7).hashed_prob(&token, t, img);
            prop_assert!(p > 0.0 && p <= 1.0);
            prop_assert_eq!(p, oracle_prob(7, &token, t as u64, img));
        }
    }
}
