//! Contrastive sentence rating.
//!
//! A caption is scored twice under teacher forcing: once with the image and
//! once with the identical text prompt but no image. The per-token difference
//! `delta = p_with - p_without` measures how much the image supports the token.
//! Each sentence is rated by the largest delta among its critical (content-word)
//! tokens; sentences rated above the threshold `tau` are kept as golden
//! sentences.

pub mod lexicon;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError, ImageRef, PromptParts};
use crate::text::normalize_whitespace;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RaterError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("probability lists differ in length ({with} with image, {without} without)")]
    LengthMismatch { with: usize, without: usize },
    #[error("backend returned different token segmentations for the two scoring calls")]
    SegmentationMismatch,
    #[error("nothing to rate: text is empty")]
    EmptyText,
}

/// One continuation token with its paired probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    /// Byte offsets `[start, end)` into the scored text.
    pub char_span: (usize, usize),
    pub p_with: f64,
    pub p_without: f64,
    pub delta: f64,
    pub is_critical: bool,
}

/// Sentence boundaries and the tokens each sentence owns; not yet rated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSpan {
    pub index: usize,
    pub text: String,
    pub byte_range: Range<usize>,
    pub token_range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedSentence {
    pub index: usize,
    pub text: String,
    pub token_range: (usize, usize),
    /// Largest delta over critical tokens; `-inf` (serialized as `null`) when there are none.
    #[serde(with = "rating_serde")]
    pub rating: f64,
    pub critical_count: usize,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenSentenceSet {
    pub sentences: Vec<String>,
    /// Index of each golden sentence in the source text.
    pub source_indices: Vec<usize>,
    pub tau_used: f64,
    pub fallback_applied: bool,
}

impl GoldenSentenceSet {
    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    /// Golden sentences joined with single spaces, the backbone handed to the text model.
    pub fn backbone(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub sentences: Vec<RatedSentence>,
    pub golden: GoldenSentenceSet,
}

/// Element-wise `p_with - p_without`.
pub fn compute_delta(p_with: &[f64], p_without: &[f64]) -> Result<Vec<f64>, RaterError> {
    if p_with.len() != p_without.len() {
        return Err(RaterError::LengthMismatch {
            with: p_with.len(),
            without: p_without.len(),
        });
    }
    Ok(p_with.iter().zip(p_without).map(|(a, b)| a - b).collect())
}

/// Scores `text` with and without the image (same text prompt) and pairs the results.
pub async fn compute_token_scores(
    gateway: &Gateway,
    image: &ImageRef,
    instruction: &str,
    text: &str,
) -> Result<Vec<TokenScore>, RaterError> {
    if text.is_empty() {
        return Err(RaterError::EmptyText);
    }
    let with_image = PromptParts::text(instruction).with_image(image.clone());
    let without_image = with_image.without_image();
    let (with, without) = tokio::join!(
        gateway.score_continuation(&with_image, text),
        gateway.score_continuation(&without_image, text),
    );
    let (with, without) = (with?, without?);
    if with.tokens != without.tokens {
        return Err(RaterError::SegmentationMismatch);
    }
    pair_scores(with.tokens, &with.probs, &without.probs)
}

/// Builds token scores from already-paired probability lists.
pub fn pair_scores(tokens: Vec<String>, p_with: &[f64], p_without: &[f64]) -> Result<Vec<TokenScore>, RaterError> {
    let deltas = compute_delta(p_with, p_without)?;
    if deltas.len() != tokens.len() {
        return Err(RaterError::LengthMismatch {
            with: tokens.len(),
            without: deltas.len(),
        });
    }
    let critical = identify_critical_tokens(&tokens);
    let mut offset = 0;
    Ok(tokens
        .into_iter()
        .enumerate()
        .map(|(i, token)| {
            let start = offset;
            offset += token.len();
            TokenScore {
                char_span: (start, offset),
                p_with: p_with[i],
                p_without: p_without[i],
                delta: deltas[i],
                is_critical: critical[i],
                token,
            }
        })
        .collect())
}

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}'];

/// Byte offsets just past each sentence terminator.
///
/// A terminator is `.`, `!` or `?` (plus any closing quotes or brackets right
/// after it) followed by whitespace or end of text. A period between two
/// digits is never followed by whitespace, so decimals do not split.
fn sentence_ends(text: &str) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, n)) = chars.peek() {
            if CLOSERS.contains(&n) {
                end = j + n.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        match chars.peek() {
            None => ends.push(end),
            Some(&(_, n)) if n.is_whitespace() => ends.push(end),
            _ => {}
        }
    }
    ends
}

/// Splits `text` into sentences and assigns every token to the sentence its first byte falls in.
pub fn segment_sentences(text: &str, tokens: &[TokenScore]) -> Vec<SentenceSpan> {
    let mut ranges: Vec<Range<usize>> = Vec::new();
    let mut start = 0;
    for end in sentence_ends(text).into_iter().chain([text.len()]) {
        if end <= start {
            continue;
        }
        if text[start..end].trim().is_empty() {
            // whitespace-only stretch: glue onto the neighbouring sentence
            match ranges.last_mut() {
                Some(prev) => prev.end = end,
                None => continue,
            }
        } else {
            ranges.push(start..end);
        }
        start = end;
    }
    let mut spans: Vec<SentenceSpan> = ranges
        .into_iter()
        .enumerate()
        .map(|(index, r)| SentenceSpan {
            index,
            text: text[r.clone()].trim().to_string(),
            byte_range: r,
            token_range: 0..0,
        })
        .collect();
    if spans.is_empty() {
        return spans;
    }

    let mut sentence = 0;
    let mut first_token = 0;
    for (t, tok) in tokens.iter().enumerate() {
        let s = tok.char_span.0;
        while sentence + 1 < spans.len() && s >= spans[sentence].byte_range.end {
            spans[sentence].token_range = first_token..t;
            first_token = t;
            sentence += 1;
        }
    }
    spans[sentence].token_range = first_token..tokens.len();
    for span in spans.iter_mut().skip(sentence + 1) {
        span.token_range = tokens.len()..tokens.len();
    }
    spans
}

fn word_key(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Critical-token mask over a contiguous token sequence.
///
/// Words are the whitespace-delimited runs of the concatenated token text,
/// trimmed of surrounding punctuation. A token is critical when it contains
/// an alphanumeric character and overlaps a word that is not in the
/// function-word lexicon.
pub fn identify_critical_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<bool> {
    let text: String = tokens.iter().map(AsRef::as_ref).collect();
    let mut content = vec![false; text.len()];
    let mut pos = 0;
    for piece in text.split_inclusive(char::is_whitespace) {
        let word = piece.trim_end();
        let key = word_key(word);
        if !key.is_empty() && !lexicon::is_function_word(&key) {
            content[pos..pos + word.len()].fill(true);
        }
        pos += piece.len();
    }
    let mut offset = 0;
    tokens
        .iter()
        .map(|tok| {
            let tok = tok.as_ref();
            let range = offset..offset + tok.len();
            offset += tok.len();
            tok.chars().any(char::is_alphanumeric) && content[range].iter().any(|&c| c)
        })
        .collect()
}

/// Rates each sentence by the maximum delta over its critical tokens.
pub fn rate_sentences(sentences: &[SentenceSpan], tokens: &[TokenScore], tau: f64) -> Vec<RatedSentence> {
    sentences
        .iter()
        .map(|s| {
            let critical = tokens[s.token_range.clone()].iter().filter(|t| t.is_critical);
            let (rating, count) = critical.fold((f64::NEG_INFINITY, 0), |(m, n), t| (m.max(t.delta), n + 1));
            RatedSentence {
                index: s.index,
                text: s.text.clone(),
                token_range: (s.token_range.start, s.token_range.end),
                rating,
                critical_count: count,
                retained: rating > tau,
            }
        })
        .collect()
}

/// Golden set from rated sentences, optionally falling back to the single best
/// sentence (first on ties) when nothing clears `tau`.
pub fn select_golden(rated: &[RatedSentence], tau: f64, fallback: bool) -> GoldenSentenceSet {
    let mut golden = GoldenSentenceSet {
        sentences: Vec::new(),
        source_indices: Vec::new(),
        tau_used: tau,
        fallback_applied: false,
    };
    for s in rated.iter().filter(|s| s.retained) {
        golden.sentences.push(s.text.clone());
        golden.source_indices.push(s.index);
    }
    if golden.is_empty() && fallback {
        let best = rated
            .iter()
            .reduce(|best, s| if s.rating > best.rating { s } else { best });
        if let Some(best) = best {
            golden.sentences.push(best.text.clone());
            golden.source_indices.push(best.index);
            golden.fallback_applied = true;
        }
    }
    golden
}

/// Rates the sentences and selects the golden set, with the empty-set fallback.
pub fn rate_and_select(sentences: &[SentenceSpan], tokens: &[TokenScore], tau: f64) -> Rating {
    let rated = rate_sentences(sentences, tokens, tau);
    let golden = select_golden(&rated, tau, true);
    Rating {
        sentences: rated,
        golden,
    }
}

/// Full rating of a caption: token scores plus sentence ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRating {
    pub tokens: Vec<TokenScore>,
    pub sentences: Vec<RatedSentence>,
    pub golden: GoldenSentenceSet,
}

pub async fn rate_caption(
    gateway: &Gateway,
    image: &ImageRef,
    instruction: &str,
    caption: &str,
    tau: f64,
) -> Result<CaptionRating, RaterError> {
    let tokens = compute_token_scores(gateway, image, instruction, caption).await?;
    let spans = segment_sentences(caption, &tokens);
    let Rating { sentences, golden } = rate_and_select(&spans, &tokens, tau);
    Ok(CaptionRating {
        tokens,
        sentences,
        golden,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerFilter {
    pub filtered_text: String,
    pub sentences: Vec<RatedSentence>,
    pub excluded: bool,
}

/// Drops answer sentences that the image does not support, conditioning on
/// `instruction` as the text prompt. No fallback: an answer with no surviving
/// sentence comes back empty and excluded.
pub async fn filter_answer(
    gateway: &Gateway,
    image: &ImageRef,
    instruction: &str,
    answer: &str,
    tau_ans: f64,
) -> Result<AnswerFilter, RaterError> {
    if answer.trim().is_empty() {
        return Ok(AnswerFilter {
            filtered_text: String::new(),
            sentences: Vec::new(),
            excluded: true,
        });
    }
    let tokens = compute_token_scores(gateway, image, instruction, answer).await?;
    let spans = segment_sentences(answer, &tokens);
    let sentences = rate_sentences(&spans, &tokens, tau_ans);
    let kept: Vec<&str> = sentences
        .iter()
        .filter(|s| s.retained)
        .map(|s| s.text.as_str())
        .collect();
    let filtered_text = normalize_whitespace(&kept.join(" "));
    Ok(AnswerFilter {
        excluded: filtered_text.is_empty(),
        filtered_text,
        sentences,
    })
}

mod rating_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}
