//! Heuristic question answering: object instructions from golden sentences,
//! position instructions derived from them, budgeted scheduling, and filtered
//! visual answers.

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError, ImageRef, PromptKind, PromptParts};
use crate::prompts::{slot_map, Template, TemplateError};
use crate::rater::{filter_answer, GoldenSentenceSet, RatedSentence};
use crate::text::normalize_whitespace;

/// Every instruction line starts with this stem.
pub const INSTRUCTION_STEM: &str = "Describe more details about";

const POSITION_PREFIX: &str = "the position of";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QaError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    Object,
    Position,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub kind: InstructionKind,
    pub text: String,
    pub target_object: String,
    /// Index into the golden sentence list.
    pub source_sentence_index: usize,
    /// Position in the schedule; assigned by [`schedule_instructions`].
    pub ordinal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailAnswer {
    pub instruction: Instruction,
    pub raw_text: String,
    pub filtered_text: String,
    pub sentence_ratings: Vec<RatedSentence>,
    pub excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Cap on the total number of scheduled instructions (object and position combined).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub n_max: usize,
}

impl Budget {
    pub fn new(n_max: usize) -> Self {
        Budget { n_max }
    }
}

/// Object instructions per golden sentence, plus the sentences whose response could not be parsed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaisedInstructions {
    pub per_sentence: Vec<Vec<Instruction>>,
    pub parse_failures: Vec<usize>,
}

impl RaisedInstructions {
    pub fn total(&self) -> usize {
        self.per_sentence.iter().map(Vec::len).sum()
    }
}

/// Object phrase of an instruction: the text after the stem, without a leading
/// article, the position prefix or trailing punctuation.
pub fn target_of(instruction: &str) -> Option<String> {
    let lower = instruction.to_lowercase();
    let at = lower.find(&INSTRUCTION_STEM.to_lowercase())?;
    let mut rest = instruction[at + INSTRUCTION_STEM.len()..].trim();
    if rest.to_lowercase().starts_with(POSITION_PREFIX) {
        rest = rest[POSITION_PREFIX.len()..].trim();
    }
    for article in ["the ", "a ", "an "] {
        if rest.len() >= article.len() && rest[..article.len()].eq_ignore_ascii_case(article) {
            rest = rest[article.len()..].trim_start();
            break;
        }
    }
    let target = rest.trim_end_matches(|c: char| !c.is_alphanumeric()).trim();
    (!target.is_empty()).then(|| target.to_string())
}

/// Keeps lines that start with the instruction stem (after optional list markers).
pub fn parse_instructions(response: &str, sentence_index: usize) -> Vec<Instruction> {
    response
        .lines()
        .filter_map(|line| {
            let line = line
                .trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
                .trim();
            if !line.to_lowercase().starts_with(&INSTRUCTION_STEM.to_lowercase()) {
                return None;
            }
            let target = target_of(line)?;
            Some(Instruction {
                kind: InstructionKind::Object,
                text: normalize_whitespace(line),
                target_object: target,
                source_sentence_index: sentence_index,
                ordinal: 0,
            })
        })
        .collect()
}

/// One text-model call per golden sentence; targets are deduplicated
/// case-insensitively across sentences, first occurrence wins.
pub async fn raise_object_instructions(
    gateway: &Gateway,
    golden: &GoldenSentenceSet,
    template: &Template,
) -> Result<RaisedInstructions, QaError> {
    let prompts = golden
        .sentences
        .iter()
        .map(|s| {
            let slots = slot_map([("sentence", s.as_str())]);
            Ok(PromptParts::text(template.render(&slots)?)
                .with_kind(PromptKind::InstructionGeneration)
                .with_slots(slots))
        })
        .collect::<Result<Vec<_>, TemplateError>>()?;
    let responses = join_all(prompts.iter().map(|p| gateway.generate_text(p))).await;

    let mut raised = RaisedInstructions::default();
    let mut seen = std::collections::HashSet::new();
    for (k, resp) in responses.into_iter().enumerate() {
        let parsed = parse_instructions(&resp?, k);
        if parsed.is_empty() {
            log::warn!("no well-formed instructions for golden sentence {k}; skipping it");
            raised.parse_failures.push(k);
        }
        let kept = parsed
            .into_iter()
            .filter(|i| seen.insert(i.target_object.to_lowercase()))
            .collect();
        raised.per_sentence.push(kept);
    }
    Ok(raised)
}

/// Position counterpart of one object instruction: `"... about the position of the <object>"`.
pub fn position_instruction(object: &Instruction) -> Instruction {
    let lower = object.text.to_lowercase();
    let text = match lower.find(&INSTRUCTION_STEM.to_lowercase()) {
        Some(at) => {
            let split = at + INSTRUCTION_STEM.len();
            format!("{} {POSITION_PREFIX}{}", &object.text[..split], &object.text[split..])
        }
        None => format!("{INSTRUCTION_STEM} {POSITION_PREFIX} the {}", object.target_object),
    };
    Instruction {
        kind: InstructionKind::Position,
        text,
        ..object.clone()
    }
}

pub fn derive_position_instructions(objects: &[Instruction]) -> Vec<Instruction> {
    objects.iter().map(position_instruction).collect()
}

/// Round-robin over sentences; each object contributes its object instruction
/// immediately followed by its position instruction; cut at `budget.n_max`.
pub fn schedule_instructions(
    objects: &[Vec<Instruction>],
    positions: &[Vec<Instruction>],
    budget: Budget,
) -> Vec<Instruction> {
    let mut out = Vec::new();
    let rounds = objects.iter().map(Vec::len).max().unwrap_or(0);
    'outer: for r in 0..rounds {
        for (k, sentence) in objects.iter().enumerate() {
            let Some(obj) = sentence.get(r) else { continue };
            let pos = positions
                .get(k)
                .and_then(|p| p.get(r))
                .filter(|p| p.target_object == obj.target_object);
            for inst in std::iter::once(obj).chain(pos) {
                if out.len() >= budget.n_max {
                    break 'outer;
                }
                out.push(Instruction {
                    ordinal: out.len(),
                    ..inst.clone()
                });
            }
        }
    }
    out
}

/// Asks the vision model every scheduled instruction and filters each answer.
/// Results keep schedule order; a failed call yields an excluded answer with an error note.
pub async fn collect_details(
    gateway: &Gateway,
    image: &ImageRef,
    scheduled: &[Instruction],
    tau_ans: f64,
    answer_template: &Template,
) -> Vec<DetailAnswer> {
    let jobs = scheduled.iter().map(|inst| async move {
        let failed = |raw: String, e: String| DetailAnswer {
            instruction: inst.clone(),
            raw_text: raw,
            filtered_text: String::new(),
            sentence_ratings: Vec::new(),
            excluded: true,
            error: Some(e),
        };
        let slots = slot_map([
            ("instruction", inst.text.as_str()),
            ("object", inst.target_object.as_str()),
        ]);
        let prompt = match answer_template.render(&slots) {
            Ok(p) => p,
            Err(e) => return failed(String::new(), e.to_string()),
        };
        let raw = match gateway.answer_visual_question(image, &prompt).await {
            Ok(r) => r,
            Err(e) => return failed(String::new(), e.to_string()),
        };
        match filter_answer(gateway, image, &prompt, &raw, tau_ans).await {
            Ok(f) => DetailAnswer {
                instruction: inst.clone(),
                raw_text: raw,
                filtered_text: f.filtered_text,
                sentence_ratings: f.sentences,
                excluded: f.excluded,
                error: None,
            },
            Err(e) => failed(raw, e.to_string()),
        }
    });
    join_all(jobs).await
}

/// Filtered texts of usable answers of one kind, in schedule order.
pub fn usable_details(answers: &[DetailAnswer], kind: InstructionKind) -> Vec<String> {
    answers
        .iter()
        .filter(|a| a.instruction.kind == kind && !a.excluded)
        .map(|a| a.filtered_text.clone())
        .collect()
}
