//! Prompt templates with `{{name}}` placeholders.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}` has no value for placeholder `{name}`")]
    MissingSlot { template: String, name: String },
    #[error("template `{template}` is missing required placeholder `{name}`")]
    MissingPlaceholder { template: String, name: String },
    #[error("template `{template}` has an unterminated `{{{{`")]
    Unterminated { template: String },
    #[error("cannot read template {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    source: String,
    pieces: Vec<Piece>,
}

impl Template {
    /// Parses `text`; trailing whitespace of the file is dropped.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Template, TemplateError> {
        let name = name.into();
        let source = text.trim_end().to_string();
        let mut pieces = Vec::new();
        let mut rest = source.as_str();
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after
                .find("}}")
                .ok_or_else(|| TemplateError::Unterminated { template: name.clone() })?;
            pieces.push(Piece::Slot(after[..close].trim().to_string()));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Template { name, source, pieces })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.as_str()),
                Piece::Text(_) => None,
            })
            .collect()
    }

    pub fn require(&self, names: &[&str]) -> Result<(), TemplateError> {
        let have = self.placeholders();
        for n in names {
            if !have.contains(n) {
                return Err(TemplateError::MissingPlaceholder {
                    template: self.name.clone(),
                    name: n.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.source.len());
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(slots.get(s).ok_or_else(|| TemplateError::MissingSlot {
                    template: self.name.clone(),
                    name: s.clone(),
                })?),
            }
        }
        Ok(out)
    }
}

/// Optional per-template file overrides, relative to the config file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPaths {
    pub instruction_generation: Option<PathBuf>,
    pub visual_answer: Option<PathBuf>,
    pub object_summary: Option<PathBuf>,
    pub position_summary: Option<PathBuf>,
    pub final_caption: Option<PathBuf>,
    pub prism_answer: Option<PathBuf>,
}

pub const DEFAULT_INSTRUCTION_GENERATION: &str = include_str!("../prompts/instruction_generation.txt");
pub const DEFAULT_VISUAL_ANSWER: &str = include_str!("../prompts/visual_answer.txt");
pub const DEFAULT_OBJECT_SUMMARY: &str = include_str!("../prompts/object_summary.txt");
pub const DEFAULT_POSITION_SUMMARY: &str = include_str!("../prompts/position_summary.txt");
pub const DEFAULT_FINAL_CAPTION: &str = include_str!("../prompts/final_caption.txt");
pub const DEFAULT_PRISM_ANSWER: &str = include_str!("../prompts/prism_answer.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub instruction_generation: Template,
    pub visual_answer: Template,
    pub object_summary: Template,
    pub position_summary: Template,
    pub final_caption: Template,
    pub prism_answer: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        let t = |name, text| Template::parse(name, text).expect("bundled template parses");
        PromptSet {
            instruction_generation: t("instruction_generation", DEFAULT_INSTRUCTION_GENERATION),
            visual_answer: t("visual_answer", DEFAULT_VISUAL_ANSWER),
            object_summary: t("object_summary", DEFAULT_OBJECT_SUMMARY),
            position_summary: t("position_summary", DEFAULT_POSITION_SUMMARY),
            final_caption: t("final_caption", DEFAULT_FINAL_CAPTION),
            prism_answer: t("prism_answer", DEFAULT_PRISM_ANSWER),
        }
    }
}

impl PromptSet {
    /// Loads overrides from `paths` (relative paths resolve against `base_dir`) over the bundled defaults.
    pub fn load(paths: &PromptPaths, base_dir: &Path) -> Result<PromptSet, TemplateError> {
        let mut set = PromptSet::default();
        let slots: [(&Option<PathBuf>, &mut Template); 6] = [
            (&paths.instruction_generation, &mut set.instruction_generation),
            (&paths.visual_answer, &mut set.visual_answer),
            (&paths.object_summary, &mut set.object_summary),
            (&paths.position_summary, &mut set.position_summary),
            (&paths.final_caption, &mut set.final_caption),
            (&paths.prism_answer, &mut set.prism_answer),
        ];
        for (path, slot) in slots {
            if let Some(p) = path {
                let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let text = std::fs::read_to_string(&full).map_err(|e| TemplateError::Io {
                    path: full.clone(),
                    reason: e.to_string(),
                })?;
                *slot = Template::parse(slot.name().to_string(), &text)?;
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        self.instruction_generation.require(&["sentence"])?;
        self.visual_answer.require(&["instruction"])?;
        self.object_summary.require(&["golden", "details"])?;
        self.position_summary.require(&["golden", "details"])?;
        self.final_caption.require(&["golden", "c_o", "c_p"])?;
        self.prism_answer.require(&["caption", "question"])?;
        Ok(())
    }

    /// SHA-256 over all template sources, in a fixed order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [
            &self.instruction_generation,
            &self.visual_answer,
            &self.object_summary,
            &self.position_summary,
            &self.final_caption,
            &self.prism_answer,
        ] {
            h.update((t.source.len() as u64).to_le_bytes());
            h.update(t.source.as_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn slot_map<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}
