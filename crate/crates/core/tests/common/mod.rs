#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use groundcap_core::eval::SynonymMap;
use groundcap_core::pipeline::FrozenClock;
use groundcap_core::{Pipeline, PipelineConfig};
use serde::Deserialize;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// Set `GROUNDCAP_BLESS=1` to rewrite golden files instead of comparing.
pub fn blessing() -> bool {
    std::env::var_os("GROUNDCAP_BLESS").is_some_and(|v| v == "1")
}

/// Compares `actual` with the golden file, or rewrites it when blessing.
pub fn check_golden(rel: &str, actual: &str) -> Result<(), String> {
    let path = fixture(rel);
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| "length".to_string(), |l| format!("line {}", l + 1));
        Err(format!("{} differs from the committed file at {line}", path.display()))
    }
}

/// Mock pipeline with the settings the golden files were produced with.
pub fn golden_pipeline(budget_n: usize) -> Pipeline {
    let mut cfg = PipelineConfig::mock(7);
    cfg.budget_n = budget_n;
    cfg.tau = 0.0;
    Pipeline::new(cfg).unwrap().with_clock(Arc::new(FrozenClock))
}

pub fn golden_batch_input(dir: &Path) -> PathBuf {
    let input = dir.join("batch.jsonl");
    let lines: String = (0..10)
        .map(|i| format!("{{\"id\":\"img-{i}\",\"image\":\"img-{i}\"}}\n"))
        .collect();
    std::fs::write(&input, lines).unwrap();
    input
}

/// Sorts JSONL lines by their text so completion order does not matter.
pub fn sorted_lines(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().collect();
    lines.sort_unstable();
    lines.iter().map(|l| format!("{l}\n")).collect()
}

pub struct ChairFixture {
    pub captions: Vec<(String, String)>,
    pub ground_truth: BTreeMap<String, BTreeSet<String>>,
    pub synonyms: SynonymMap,
    pub labeled_mentions: BTreeMap<String, BTreeSet<String>>,
}

pub fn chair_fixture() -> ChairFixture {
    #[derive(Deserialize)]
    struct Caption {
        id: String,
        caption: String,
    }
    #[derive(Deserialize)]
    struct Gt {
        id: String,
        objects: BTreeSet<String>,
    }
    #[derive(Deserialize)]
    struct Mentions {
        id: String,
        mentioned: BTreeSet<String>,
    }
    fn lines<T: for<'de> Deserialize<'de>>(name: &str) -> Vec<T> {
        std::fs::read_to_string(fixture(&format!("chair/{name}")))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
    ChairFixture {
        captions: lines::<Caption>("captions.jsonl")
            .into_iter()
            .map(|c| (c.id, c.caption))
            .collect(),
        ground_truth: lines::<Gt>("gt.jsonl").into_iter().map(|g| (g.id, g.objects)).collect(),
        synonyms: serde_json::from_str(&std::fs::read_to_string(fixture("chair/synonyms.json")).unwrap()).unwrap(),
        labeled_mentions: lines::<Mentions>("mentions.jsonl")
            .into_iter()
            .map(|m| (m.id, m.mentioned))
            .collect(),
    }
}

/// Direct recount from the labeled sets: per caption, every mention not in its ground truth is hallucinated.
pub fn recount_chair(fx: &ChairFixture) -> (f64, f64) {
    let (mut with_h, mut h, mut m) = (0usize, 0usize, 0usize);
    for (id, mentioned) in &fx.labeled_mentions {
        let gt = &fx.ground_truth[id];
        let bad = mentioned.iter().filter(|o| !gt.contains(*o)).count();
        m += mentioned.len();
        h += bad;
        with_h += usize::from(bad > 0);
    }
    (with_h as f64 / fx.labeled_mentions.len() as f64, h as f64 / m as f64)
}
