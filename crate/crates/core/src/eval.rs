//! Evaluation helpers: CHAIR object-hallucination rates, caption statistics,
//! caption-only question answering and budget sweeps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError, PromptKind, PromptParts};
use crate::pipeline::{CaptionRecord, ImageInput, Pipeline};
use crate::prompts::{slot_map, Template, TemplateError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("alias `{alias}` maps to both `{first}` and `{second}`")]
    DuplicateAlias {
        alias: String,
        first: String,
        second: String,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Canonical object name to its aliases.
pub type SynonymMap = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairItem {
    pub caption_id: String,
    pub mentioned_objects: BTreeSet<String>,
    pub ground_truth_objects: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairInput {
    pub items: Vec<ChairItem>,
    #[serde(default)]
    pub synonym_map: SynonymMap,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairCounts {
    pub captions: usize,
    pub captions_with_hallucination: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
    pub counts: ChairCounts,
}

/// Lower-cased alias to canonical form; canonical names map to themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Canonicalizer {
    map: HashMap<String, String>,
}

impl Canonicalizer {
    pub fn new(synonyms: &SynonymMap) -> Result<Self, EvalError> {
        let mut map: HashMap<String, String> = HashMap::new();
        let entries = synonyms.iter().flat_map(|(canon, aliases)| {
            let canon_l = canon.trim().to_lowercase();
            std::iter::once(canon_l.clone())
                .chain(aliases.iter().map(|a| a.trim().to_lowercase()))
                .map(move |a| (a, canon_l.clone()))
        });
        for (alias, canon) in entries {
            match map.get(&alias) {
                Some(existing) if *existing != canon => {
                    return Err(EvalError::DuplicateAlias {
                        alias,
                        first: existing.clone(),
                        second: canon,
                    })
                }
                Some(_) => {}
                None => {
                    map.insert(alias, canon);
                }
            }
        }
        Ok(Canonicalizer { map })
    }

    pub fn canonical(&self, name: &str) -> String {
        let l = name.trim().to_lowercase();
        self.map.get(&l).cloned().unwrap_or(l)
    }

    pub fn canonical_set<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> BTreeSet<String> {
        names.into_iter().map(|n| self.canonical(n)).collect()
    }
}

/// Sentence-level and instance-level hallucination rates. An empty corpus, or
/// one without mentions, scores 0 on the affected rate.
pub fn chair_scores(input: &ChairInput) -> Result<ChairScores, EvalError> {
    let canon = Canonicalizer::new(&input.synonym_map)?;
    let mut counts = ChairCounts::default();
    for item in &input.items {
        let mentioned = canon.canonical_set(&item.mentioned_objects);
        let truth = canon.canonical_set(&item.ground_truth_objects);
        let hallucinated = mentioned.difference(&truth).count();
        counts.captions += 1;
        counts.mentions += mentioned.len();
        counts.hallucinated_mentions += hallucinated;
        counts.captions_with_hallucination += usize::from(hallucinated > 0);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(ChairScores {
        chair_s: ratio(counts.captions_with_hallucination, counts.captions),
        chair_i: ratio(counts.hallucinated_mentions, counts.mentions),
        counts,
    })
}

/// Object names to look for in captions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    /// Phrases as lower-case word lists, longest first.
    phrases: Vec<(Vec<String>, String)>,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .map(|w| w.trim_matches('-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocabulary {
    pub fn new<'a>(objects: impl IntoIterator<Item = &'a str>, synonyms: &SynonymMap) -> Result<Self, EvalError> {
        let canon = Canonicalizer::new(synonyms)?;
        let mut names: BTreeMap<String, String> = BTreeMap::new();
        for o in objects {
            let c = canon.canonical(o);
            names.insert(c.clone(), c);
        }
        for (alias, c) in &canon.map {
            names.insert(alias.clone(), c.clone());
        }
        let mut phrases: Vec<(Vec<String>, String)> = names
            .into_iter()
            .map(|(name, c)| (words(&name), c))
            .filter(|(w, _)| !w.is_empty())
            .collect();
        phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Vocabulary { phrases })
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

fn word_matches(word: &str, target: &str, last: bool) -> bool {
    word == target || (last && (word.strip_suffix('s') == Some(target) || word.strip_suffix("es") == Some(target)))
}

/// Canonical objects named in `caption`: case-insensitive whole-word matches
/// of names and aliases, longest phrase first, plural `s`/`es` accepted on
/// the last word.
pub fn extract_mentions(caption: &str, vocab: &Vocabulary) -> BTreeSet<String> {
    let w = words(caption);
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < w.len() {
        let hit = vocab.phrases.iter().find(|(p, _)| {
            i + p.len() <= w.len()
                && p.iter()
                    .enumerate()
                    .all(|(k, pw)| word_matches(&w[i + k], pw, k + 1 == p.len()))
        });
        match hit {
            Some((p, canon)) => {
                found.insert(canon.clone());
                i += p.len();
            }
            None => i += 1,
        }
    }
    found
}

/// Builds CHAIR input from raw captions. The vocabulary is every synonym-map
/// key and alias plus every ground-truth object. Captions without ground
/// truth are left out and returned by id.
pub fn chair_input_from_captions(
    captions: &[(String, String)],
    ground_truth: &BTreeMap<String, BTreeSet<String>>,
    synonyms: &SynonymMap,
) -> Result<(ChairInput, Vec<String>), EvalError> {
    let vocab = Vocabulary::new(ground_truth.values().flatten().map(String::as_str), synonyms)?;
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for (id, caption) in captions {
        let Some(gt) = ground_truth.get(id) else {
            missing.push(id.clone());
            continue;
        };
        items.push(ChairItem {
            caption_id: id.clone(),
            mentioned_objects: extract_mentions(caption, &vocab),
            ground_truth_objects: gt.clone(),
        });
    }
    Ok((
        ChairInput {
            items,
            synonym_map: synonyms.clone(),
        },
        missing,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub median: f64,
    pub max: usize,
}

/// Streaming accumulator: exact mean, max, and a histogram for the median.
#[derive(Debug, Clone, Default)]
struct LengthAcc {
    n: usize,
    sum: u128,
    max: usize,
    hist: BTreeMap<usize, usize>,
}

impl LengthAcc {
    fn push(&mut self, v: usize) {
        self.n += 1;
        self.sum += v as u128;
        self.max = self.max.max(v);
        *self.hist.entry(v).or_default() += 1;
    }

    fn nth(&self, k: usize) -> usize {
        let mut seen = 0;
        for (&v, &c) in &self.hist {
            seen += c;
            if seen > k {
                return v;
            }
        }
        self.max
    }

    fn finish(&self) -> Option<LengthStats> {
        if self.n == 0 {
            return None;
        }
        let median = if self.n % 2 == 1 {
            self.nth(self.n / 2) as f64
        } else {
            (self.nth(self.n / 2 - 1) + self.nth(self.n / 2)) as f64 / 2.0
        };
        Some(LengthStats {
            mean: self.sum as f64 / self.n as f64,
            median,
            max: self.max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    /// Records with a final caption.
    pub count: usize,
    pub failed: usize,
    pub malformed: usize,
    pub final_chars: Option<LengthStats>,
    pub final_words: Option<LengthStats>,
    pub initial_chars: Option<LengthStats>,
    pub initial_words: Option<LengthStats>,
    pub mean_golden_sentences: Option<f64>,
    pub mean_answers_kept: Option<f64>,
    pub mean_answers_excluded: Option<f64>,
}

/// Statistics over a JSONL stream of records. Lengths count characters and whitespace-separated words.
pub fn caption_stats<R: BufRead>(reader: R) -> std::io::Result<CaptionStats> {
    let (mut fc, mut fw, mut ic, mut iw) = Default::default();
    let (mut failed, mut malformed) = (0, 0);
    let (mut golden, mut kept, mut excluded) = (0usize, 0usize, 0usize);
    let acc = |c: &mut LengthAcc, w: &mut LengthAcc, text: &str| {
        c.push(text.chars().count());
        w.push(text.split_whitespace().count());
    };
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping malformed record: {e}");
                malformed += 1;
                continue;
            }
        };
        let Some(final_caption) = rec.final_caption.as_deref().filter(|_| rec.is_ok()) else {
            failed += 1;
            continue;
        };
        acc(&mut fc, &mut fw, final_caption);
        acc(&mut ic, &mut iw, rec.initial_caption.as_deref().unwrap_or(""));
        golden += rec.golden.as_ref().map_or(0, |g| g.len());
        kept += rec.kept_answers();
        excluded += rec.excluded_answers();
    }
    let count = fc.n;
    let mean = |v: usize| (count > 0).then(|| v as f64 / count as f64);
    Ok(CaptionStats {
        count,
        failed,
        malformed,
        final_chars: fc.finish(),
        final_words: fw.finish(),
        initial_chars: ic.finish(),
        initial_words: iw.finish(),
        mean_golden_sentences: mean(golden),
        mean_answers_kept: mean(kept),
        mean_answers_excluded: mean(excluded),
    })
}

pub fn prism_prompt(template: &Template, caption: &str, question: &str) -> Result<PromptParts, EvalError> {
    if caption.trim().is_empty() {
        return Err(EvalError::Precondition("caption is empty".into()));
    }
    if question.trim().is_empty() {
        return Err(EvalError::Precondition("question is empty".into()));
    }
    let slots = slot_map([("caption", caption), ("question", question)]);
    Ok(PromptParts::text(template.render(&slots)?)
        .with_kind(PromptKind::PrismAnswer)
        .with_slots(slots))
}

/// Answers `question` from the caption alone with the text model.
pub async fn prism_answer(
    text: &Gateway,
    template: &Template,
    caption: &str,
    question: &str,
) -> Result<String, EvalError> {
    let prompt = prism_prompt(template, caption, question)?;
    Ok(text.generate_text(&prompt).await?.trim().to_string())
}

/// One record per budget, sharing the caption, rating and raised instructions.
pub async fn budget_sweep(
    pipeline: &Pipeline,
    input: &ImageInput,
    n_values: &[usize],
) -> Result<Vec<(usize, CaptionRecord)>, EvalError> {
    if n_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::Precondition("budget values must be sorted ascending".into()));
    }
    let raise = n_values.iter().any(|&n| n > 0);
    let prepared = pipeline.prepare(input, raise).await;
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        out.push((n, pipeline.finish(&prepared, n).await));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::config::PipelineConfig;
    use crate::gateway::{MockBackend, RetryPolicy};
    use crate::pipeline::FrozenClock;
    use crate::prompts::PromptSet;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn item(id: &str, m: &[&str], gt: &[&str]) -> ChairItem {
        ChairItem {
            caption_id: id.into(),
            mentioned_objects: set(m),
            ground_truth_objects: set(gt),
        }
    }

    #[test]
    fn worked_example() {
        let input = ChairInput {
            items: vec![item("a", &["dog", "cat"], &["dog"]), item("b", &["car"], &["car"])],
            synonym_map: SynonymMap::new(),
        };
        let s = chair_scores(&input).unwrap();
        assert_eq!(s.chair_s, 0.5);
        assert!((s.chair_i - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(chair_scores(&ChairInput::default()).unwrap().chair_i, 0.0);
        let clean = ChairInput {
            items: vec![item("a", &["dog"], &["dog", "cat"])],
            ..Default::default()
        };
        let s = chair_scores(&clean).unwrap();
        assert_eq!((s.chair_s, s.chair_i), (0.0, 0.0));
    }

    #[test]
    fn synonyms_canonicalize() {
        let mut syn = SynonymMap::new();
        syn.insert("dog".into(), set(&["puppy", "Hound"]));
        let input = ChairInput {
            items: vec![item("a", &["puppy"], &["hound"])],
            synonym_map: syn.clone(),
        };
        assert_eq!(chair_scores(&input).unwrap().chair_i, 0.0);
        syn.insert("wolf".into(), set(&["hound"]));
        assert!(matches!(
            chair_scores(&ChairInput {
                items: vec![],
                synonym_map: syn
            }),
            Err(EvalError::DuplicateAlias { .. })
        ));
    }

    #[test]
    fn mention_matching() {
        let vocab = Vocabulary::new(["dog", "car", "cat"], &SynonymMap::new()).unwrap();
        assert_eq!(extract_mentions("Two dogs chase a car.", &vocab), set(&["car", "dog"]));
        assert!(extract_mentions("", &vocab).is_empty());
        assert!(extract_mentions("hotdog stand", &vocab).is_empty());
        assert!(extract_mentions("The CATS sleep; cat-like pose.", &vocab).contains("cat"));

        let mut syn = SynonymMap::new();
        syn.insert("traffic light".into(), set(&["stoplight"]));
        syn.insert("bus".into(), BTreeSet::new());
        let vocab = Vocabulary::new(["light"], &syn).unwrap();
        assert_eq!(
            extract_mentions("Two traffic lights and a stoplight.", &vocab),
            set(&["traffic light"])
        );
        assert_eq!(
            extract_mentions("A light above the buses", &vocab),
            set(&["bus", "light"])
        );
    }

    #[test]
    fn stats_over_stream() {
        let mk = |caption: &str| {
            let mut r: CaptionRecord = serde_json::from_str(GOLDEN_SKELETON).unwrap();
            r.final_caption = Some(caption.to_string());
            serde_json::to_string(&r).unwrap()
        };
        let text = format!("{}\n{}\nnot json\n", mk(&"a".repeat(10)), mk(&"b".repeat(20)));
        let s = caption_stats(text.as_bytes()).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.malformed, 1);
        let c = s.final_chars.unwrap();
        assert_eq!((c.mean, c.median, c.max), (15.0, 15.0, 20));

        let empty = caption_stats(&b""[..]).unwrap();
        assert_eq!(empty.count, 0);
        assert!(empty.final_chars.is_none() && empty.mean_answers_kept.is_none());
    }

    const GOLDEN_SKELETON: &str = r#"{"image_id":"x","image_ref":{"source":{"path":"x"},"media_type":"application/octet-stream"},
        "initial_caption":"A dog.","caption_ratings":[],"golden":null,"instructions":[],"answers":[],
        "c_object":null,"c_position":null,"final_caption":null,"stage_timings":{},"config_hash":"h",
        "status":"ok","error":null}"#;

    #[tokio::test]
    async fn prism_guards_and_mock_answer() {
        let gw = Gateway::new(Arc::new(MockBackend::seeded(7)), 8, RetryPolicy::default());
        let t = PromptSet::default().prism_answer;
        let caption = "A red car is parked. A dog sleeps on the porch.";
        let a = prism_answer(&gw, &t, caption, "Where does the dog sleep?")
            .await
            .unwrap();
        assert_eq!(a, "According to the caption: A dog sleeps on the porch.");
        assert!(matches!(
            prism_answer(&gw, &t, caption, " ").await,
            Err(EvalError::Precondition(_))
        ));
        assert!(matches!(
            prism_answer(&gw, &t, "", "Why?").await,
            Err(EvalError::Precondition(_))
        ));
        let p = prism_prompt(&t, caption, "Why?").unwrap();
        assert!(p.user_text.contains(caption));
    }

    #[tokio::test]
    async fn sweep_reuses_caption() {
        let p = Pipeline::new(PipelineConfig::mock(7))
            .unwrap()
            .with_clock(Arc::new(FrozenClock));
        let input = ImageInput::new("img-3", "img-3");
        let runs = budget_sweep(&p, &input, &[0, 4, 8]).await.unwrap();
        let kept: Vec<usize> = runs.iter().map(|(_, r)| r.kept_answers()).collect();
        assert!(kept.windows(2).all(|w| w[0] <= w[1]), "{kept:?}");
        let captions: BTreeSet<_> = runs.iter().map(|(_, r)| r.initial_caption.clone()).collect();
        assert_eq!(captions.len(), 1);
        assert!(runs[0].1.instructions.is_empty());
        assert!(budget_sweep(&p, &input, &[4, 0]).await.is_err());
        assert_eq!(budget_sweep(&p, &input, &[0]).await.unwrap().len(), 1);
    }

    fn brute_chair(items: &[ChairItem]) -> (f64, f64) {
        let mut with_h = 0;
        let (mut h, mut m) = (0, 0);
        for it in items {
            let mut any = false;
            for o in &it.mentioned_objects {
                m += 1;
                if !it.ground_truth_objects.contains(o) {
                    h += 1;
                    any = true;
                }
            }
            if any {
                with_h += 1;
            }
        }
        let r = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        (r(with_h, items.len()), r(h, m))
    }

    fn corpus() -> impl Strategy<Value = Vec<ChairItem>> {
        let obj = prop::sample::select(vec!["dog", "cat", "car", "tree", "person", "cup"]);
        let objs = prop::collection::btree_set(obj.prop_map(String::from), 0..5);
        prop::collection::vec((objs.clone(), objs), 0..20).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (m, g))| ChairItem {
                    caption_id: i.to_string(),
                    mentioned_objects: m,
                    ground_truth_objects: g,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(items in corpus()) {
            let s = chair_scores(&ChairInput { items: items.clone(), synonym_map: SynonymMap::new() }).unwrap();
            prop_assert_eq!((s.chair_s, s.chair_i), brute_chair(&items));
            prop_assert!((0.0..=1.0).contains(&s.chair_s) && (0.0..=1.0).contains(&s.chair_i));
        }

        #[test]
        fn adding_hallucination_never_lowers(items in corpus().prop_filter("non-empty", |v| !v.is_empty()), idx in any::<prop::sample::Index>()) {
            let before = chair_scores(&ChairInput { items: items.clone(), synonym_map: SynonymMap::new() }).unwrap();
            let mut more = items.clone();
            let i = idx.index(more.len());
            more[i].mentioned_objects.insert("unicorn".into());
            let after = chair_scores(&ChairInput { items: more, synonym_map: SynonymMap::new() }).unwrap();
            prop_assert!(after.chair_i >= before.chair_i);
            prop_assert!(after.chair_s >= before.chair_s);
        }
    }
}
