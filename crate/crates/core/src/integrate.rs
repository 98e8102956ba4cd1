//! Caption integration: object and position summaries anchored on the golden
//! backbone, then one composition call for the final caption.
//!
//! Prompts larger than the context limit are summarized in chunks and merged
//! in a further pass with the same template.

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError, PromptKind, PromptParts};
use crate::prompts::{slot_map, PromptSet, Template, TemplateError};
use crate::rater::GoldenSentenceSet;
use crate::text::{estimate_tokens, normalize_whitespace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IntegrateError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("golden sentence set is empty")]
    EmptyGolden,
    #[error("prompt of ~{estimate} tokens exceeds the context limit of {limit}")]
    ContextOverflow { estimate: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrationPrompts {
    pub t_object: Template,
    pub t_position: Template,
    pub t_final: Template,
}

impl IntegrationPrompts {
    pub fn from_set(set: &PromptSet) -> Self {
        IntegrationPrompts {
            t_object: set.object_summary.clone(),
            t_position: set.position_summary.clone(),
            t_final: set.final_caption.clone(),
        }
    }
}

impl Default for IntegrationPrompts {
    fn default() -> Self {
        Self::from_set(&PromptSet::default())
    }
}

/// Token limits for assembled prompts. `chunk_tokens` caps each chunk pass and defaults to `limit_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBudget {
    pub limit_tokens: usize,
    pub chunk_tokens: Option<usize>,
}

impl ContextBudget {
    pub fn new(limit_tokens: usize) -> Self {
        ContextBudget {
            limit_tokens,
            chunk_tokens: None,
        }
    }

    fn chunk_cap(&self) -> usize {
        self.chunk_tokens.unwrap_or(self.limit_tokens).min(self.limit_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationResult {
    pub c_object: String,
    pub c_position: String,
    pub final_caption: String,
    pub input_token_estimate: usize,
}

/// One summary text plus what it took to produce it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetailSummary {
    pub text: String,
    /// Estimate of the unchunked prompt.
    pub input_token_estimate: usize,
    pub calls: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Facet {
    Object,
    Position,
}

impl Facet {
    fn kind(self) -> PromptKind {
        match self {
            Facet::Object => PromptKind::ObjectSummary,
            Facet::Position => PromptKind::PositionSummary,
        }
    }

    fn template(self, prompts: &IntegrationPrompts) -> &Template {
        match self {
            Facet::Object => &prompts.t_object,
            Facet::Position => &prompts.t_position,
        }
    }
}

/// Details as `- text` lines.
pub fn render_details<S: AsRef<str>>(details: &[S]) -> String {
    details
        .iter()
        .map(|d| format!("- {}", normalize_whitespace(d.as_ref())))
        .collect::<Vec<_>>()
        .join("\n")
}

fn summary_prompt(
    template: &Template,
    kind: PromptKind,
    backbone: &str,
    details: &[String],
) -> Result<PromptParts, TemplateError> {
    let rendered = render_details(details);
    let slots = slot_map([("golden", backbone), ("details", rendered.as_str())]);
    Ok(PromptParts::text(template.render(&slots)?)
        .with_kind(kind)
        .with_slots(slots))
}

/// Greedy split of `details` so each rendered chunk prompt fits `cap`.
fn chunk_details(
    template: &Template,
    backbone: &str,
    details: &[String],
    cap: usize,
) -> Result<Vec<Vec<String>>, IntegrateError> {
    let fits = |items: &[String]| -> Result<(bool, usize), TemplateError> {
        let p = summary_prompt(template, PromptKind::Other, backbone, items)?;
        let est = estimate_tokens(&p.user_text);
        Ok((est <= cap, est))
    };
    let mut chunks: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for d in details {
        current.push(d.clone());
        if fits(&current)?.0 {
            continue;
        }
        let last = current.pop().expect("just pushed");
        if current.is_empty() {
            let (_, estimate) = fits(std::slice::from_ref(&last))?;
            return Err(IntegrateError::ContextOverflow { estimate, limit: cap });
        }
        chunks.push(std::mem::take(&mut current));
        current.push(last);
    }
    if !current.is_empty() || chunks.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}

async fn summarize(
    gateway: &Gateway,
    golden: &GoldenSentenceSet,
    details: &[String],
    prompts: &IntegrationPrompts,
    budget: ContextBudget,
    facet: Facet,
) -> Result<DetailSummary, IntegrateError> {
    if golden.is_empty() {
        return Err(IntegrateError::EmptyGolden);
    }
    let backbone = golden.backbone();
    let template = facet.template(prompts);
    let full = summary_prompt(template, facet.kind(), &backbone, details)?;
    let input_token_estimate = estimate_tokens(&full.user_text);
    if input_token_estimate <= budget.limit_tokens {
        let text = gateway.generate_text(&full).await?;
        return Ok(DetailSummary {
            text: normalize_whitespace(&text),
            input_token_estimate,
            calls: 1,
        });
    }

    let mut calls = 0;
    let mut items = details.to_vec();
    loop {
        let chunks = chunk_details(template, &backbone, &items, budget.chunk_cap())?;
        if chunks.len() >= items.len() && items.len() > 1 && calls > 0 {
            // Summaries are not shrinking; further merging cannot converge.
            let p = summary_prompt(template, facet.kind(), &backbone, &items)?;
            return Err(IntegrateError::ContextOverflow {
                estimate: estimate_tokens(&p.user_text),
                limit: budget.limit_tokens,
            });
        }
        log::debug!("{facet:?} details split into {} chunk(s)", chunks.len());
        let prompts = chunks
            .iter()
            .map(|c| summary_prompt(template, facet.kind(), &backbone, c))
            .collect::<Result<Vec<_>, _>>()?;
        let texts = try_join_all(prompts.iter().map(|p| gateway.generate_text(p))).await?;
        calls += texts.len();
        items = texts.iter().map(|t| normalize_whitespace(t)).collect();
        if items.len() == 1 {
            return Ok(DetailSummary {
                text: items.remove(0),
                input_token_estimate,
                calls,
            });
        }
    }
}

/// Summarizes object details into C_o.
pub async fn integrate_object_details(
    gateway: &Gateway,
    golden: &GoldenSentenceSet,
    details: &[String],
    prompts: &IntegrationPrompts,
    budget: ContextBudget,
) -> Result<DetailSummary, IntegrateError> {
    summarize(gateway, golden, details, prompts, budget, Facet::Object).await
}

/// Summarizes position details into C_p.
pub async fn integrate_position_details(
    gateway: &Gateway,
    golden: &GoldenSentenceSet,
    details: &[String],
    prompts: &IntegrationPrompts,
    budget: ContextBudget,
) -> Result<DetailSummary, IntegrateError> {
    summarize(gateway, golden, details, prompts, budget, Facet::Position).await
}

pub fn final_prompt(
    golden: &GoldenSentenceSet,
    c_object: &str,
    c_position: &str,
    prompts: &IntegrationPrompts,
) -> Result<PromptParts, TemplateError> {
    let backbone = golden.backbone();
    let slots = slot_map([("golden", backbone.as_str()), ("c_o", c_object), ("c_p", c_position)]);
    Ok(PromptParts::text(prompts.t_final.render(&slots)?)
        .with_kind(PromptKind::FinalCaption)
        .with_slots(slots))
}

/// Composes the final caption from the backbone and both summaries.
pub async fn compose_final_caption(
    gateway: &Gateway,
    golden: &GoldenSentenceSet,
    c_object: &str,
    c_position: &str,
    prompts: &IntegrationPrompts,
    budget: ContextBudget,
) -> Result<String, IntegrateError> {
    if golden.is_empty() {
        return Err(IntegrateError::EmptyGolden);
    }
    let prompt = final_prompt(golden, c_object, c_position, prompts)?;
    let estimate = estimate_tokens(&prompt.user_text);
    if estimate > budget.limit_tokens {
        return Err(IntegrateError::ContextOverflow {
            estimate,
            limit: budget.limit_tokens,
        });
    }
    let text = normalize_whitespace(&gateway.generate_text(&prompt).await?);
    if text.is_empty() {
        return Err(GatewayError::EmptyResponse.into());
    }
    Ok(text)
}

/// Both summaries concurrently, then the final composition.
pub async fn integrate(
    gateway: &Gateway,
    golden: &GoldenSentenceSet,
    object_details: &[String],
    position_details: &[String],
    prompts: &IntegrationPrompts,
    budget: ContextBudget,
) -> Result<IntegrationResult, IntegrateError> {
    let (c_o, c_p) = tokio::join!(
        integrate_object_details(gateway, golden, object_details, prompts, budget),
        integrate_position_details(gateway, golden, position_details, prompts, budget),
    );
    let (c_o, c_p) = (c_o?, c_p?);
    let final_caption = compose_final_caption(gateway, golden, &c_o.text, &c_p.text, prompts, budget).await?;
    Ok(IntegrationResult {
        input_token_estimate: c_o.input_token_estimate + c_p.input_token_estimate,
        c_object: c_o.text,
        c_position: c_p.text,
        final_caption,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    use super::*;
    use crate::gateway::{FaultInjecting, MockBackend, RetryPolicy};

    fn golden(sentences: &[&str]) -> GoldenSentenceSet {
        GoldenSentenceSet {
            sentences: sentences.iter().map(|s| s.to_string()).collect(),
            source_indices: (0..sentences.len()).collect(),
            tau_used: 0.0,
            fallback_applied: false,
        }
    }

    fn counting() -> (Gateway, Arc<FaultInjecting>) {
        let fi = Arc::new(FaultInjecting::new(Arc::new(MockBackend::seeded(7))));
        (Gateway::new(fi.clone(), 8, RetryPolicy::default()), fi)
    }

    fn owned(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    const BIG: ContextBudget = ContextBudget {
        limit_tokens: 16_000,
        chunk_tokens: None,
    };

    #[tokio::test]
    async fn empty_details_restate_backbone() {
        let (gw, fi) = counting();
        let g = golden(&["A dog sleeps.", "A ball lies nearby."]);
        let p = IntegrationPrompts::default();
        let c_o = integrate_object_details(&gw, &g, &[], &p, BIG).await.unwrap();
        assert_eq!(c_o.text, "Object details: A dog sleeps. A ball lies nearby.");
        let c_p = integrate_position_details(&gw, &g, &[], &p, BIG).await.unwrap();
        assert_eq!(c_p.text, "Position details: A dog sleeps. A ball lies nearby.");
        assert_eq!(fi.calls(), 2);
    }

    #[tokio::test]
    async fn mock_summaries_concatenate_details() {
        let (gw, _) = counting();
        let g = golden(&["A dog sleeps."]);
        let p = IntegrationPrompts::default();
        let d = owned(&["It is brown.", "It has a red  collar.", "Its fur is short."]);
        let c_o = integrate_object_details(&gw, &g, &d, &p, BIG).await.unwrap();
        assert_eq!(
            c_o.text,
            "Object details: It is brown. It has a red collar. Its fur is short."
        );
        let c_p = integrate_position_details(
            &gw,
            &g,
            &owned(&["It is on the left.", "It faces the camera."]),
            &p,
            BIG,
        )
        .await
        .unwrap();
        assert_eq!(c_p.text, "Position details: It is on the left. It faces the camera.");
        let f = compose_final_caption(&gw, &g, &c_o.text, &c_p.text, &p, BIG)
            .await
            .unwrap();
        assert_eq!(
            f,
            "A dog sleeps. It is brown. It has a red collar. Its fur is short. It is on the left. It faces the camera."
        );
    }

    #[tokio::test]
    async fn final_caption_with_empty_summaries() {
        let (gw, _) = counting();
        let g = golden(&["A dog sleeps."]);
        let p = IntegrationPrompts::default();
        let f = compose_final_caption(&gw, &g, "", "", &p, BIG).await.unwrap();
        assert_eq!(f, "A dog sleeps.");
        let prompt = final_prompt(&g, "x", "y", &p).unwrap();
        assert!(prompt.user_text.contains("A dog sleeps."));
        assert!(matches!(
            compose_final_caption(&gw, &golden(&[]), "", "", &p, BIG).await,
            Err(IntegrateError::EmptyGolden)
        ));
    }

    #[tokio::test]
    async fn oversized_prompt_is_chunked() {
        let (gw, fi) = counting();
        let g = golden(&["A busy street."]);
        let p = IntegrationPrompts::default();
        // 50 details of ~2000 bytes: ~25k estimated tokens against a 16k limit.
        let details: Vec<String> = (0..50)
            .map(|i| format!("Detail {i}: {}.", "word ".repeat(396)))
            .collect();
        let full = summary_prompt(&p.t_object, PromptKind::ObjectSummary, &g.backbone(), &details).unwrap();
        let est = estimate_tokens(&full.user_text);
        assert!((24_000..27_000).contains(&est), "{est}");

        let s = integrate_object_details(&gw, &g, &details, &p, BIG).await.unwrap();
        assert_eq!(s.input_token_estimate, est);
        // Two chunk passes and one merge.
        assert_eq!(s.calls, 3);
        assert_eq!(fi.calls(), 3);
        assert!(s.text.contains("Detail 0:") && s.text.contains("Detail 49:"));

        let s = integrate_position_details(&gw, &g, &details, &p, BIG).await.unwrap();
        assert_eq!(s.calls, 3);
    }

    #[test]
    fn chunking_rule() {
        let p = IntegrationPrompts::default();
        let overhead = estimate_tokens(
            &summary_prompt(&p.t_object, PromptKind::Other, "B.", &[])
                .unwrap()
                .user_text,
        );
        let details: Vec<String> = (0..6).map(|_| "x".repeat(400)).collect();
        // Room for exactly two 400-byte lines (~100 tokens each plus the marker).
        let cap = overhead + 205;
        let chunks = chunk_details(&p.t_object, "B.", &details, cap).unwrap();
        assert_eq!(chunks.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 2]);
        let err = chunk_details(&p.t_object, "B.", &["y".repeat(4000)], cap).unwrap_err();
        assert!(matches!(err, IntegrateError::ContextOverflow { .. }));
    }

    #[tokio::test]
    async fn single_detail_beyond_limit_overflows() {
        let (gw, _) = counting();
        let g = golden(&["A dog."]);
        let budget = ContextBudget::new(100);
        let r = integrate_object_details(&gw, &g, &["z".repeat(2000)], &IntegrationPrompts::default(), budget).await;
        assert!(matches!(r, Err(IntegrateError::ContextOverflow { .. })));
    }

    #[tokio::test]
    async fn integrate_is_deterministic() {
        let g = golden(&["A dog sleeps."]);
        let p = IntegrationPrompts::default();
        let d_o = owned(&["It is brown."]);
        let d_p = owned(&["It is on the left."]);
        let (a, _) = counting();
        let (b, _) = counting();
        let r1 = integrate(&a, &g, &d_o, &d_p, &p, BIG).await.unwrap();
        let r2 = integrate(&b, &g, &d_o, &d_p, &p, BIG).await.unwrap();
        assert_eq!(r1, r2);
        assert!(!r1.final_caption.is_empty());
    }

    fn prompt_hash(details: &[String]) -> Vec<u8> {
        let p = IntegrationPrompts::default();
        let parts = summary_prompt(&p.t_object, PromptKind::ObjectSummary, "A dog.", details).unwrap();
        Sha256::digest(parts.user_text.as_bytes()).to_vec()
    }

    proptest! {
        #[test]
        fn assembly_injective_and_monotone(
            details in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,5}\\.", 1..8),
            idx in any::<prop::sample::Index>(),
            extra in "[a-z]{1,8}\\.",
        ) {
            let i = idx.index(details.len());
            let mut changed = details.clone();
            changed[i] = format!("{} {}", changed[i], extra);
            prop_assert_ne!(prompt_hash(&details), prompt_hash(&changed));

            let p = IntegrationPrompts::default();
            let est = |d: &[String]| estimate_tokens(
                &summary_prompt(&p.t_object, PromptKind::ObjectSummary, "A dog.", d).unwrap().user_text,
            );
            let mut more = details.clone();
            more.push(extra);
            prop_assert!(est(&more) >= est(&details));
        }
    }
}
