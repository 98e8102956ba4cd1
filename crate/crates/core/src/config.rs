//! Pipeline configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{BackendKind, BackendSpec};
use crate::integrate::ContextBudget;
use crate::prompts::{hex, PromptPaths, PromptSet, TemplateError};

pub const DEFAULT_CAPTION_INSTRUCTION: &str = "Describe this image in detail.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "default_min_short_edge")]
    pub min_short_edge: u32,
    #[serde(default = "default_complexity_min")]
    pub complexity_min: f64,
    #[serde(default = "default_complexity_max")]
    pub complexity_max: f64,
    /// Command that receives the image path as its last argument and prints a score.
    #[serde(default)]
    pub complexity_hook: Option<String>,
}

fn default_min_short_edge() -> u32 {
    600
}
fn default_complexity_min() -> f64 {
    0.4
}
fn default_complexity_max() -> f64 {
    0.8
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_short_edge: default_min_short_edge(),
            complexity_min: default_complexity_min(),
            complexity_max: default_complexity_max(),
            complexity_hook: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub vision_backend: BackendSpec,
    pub text_backend: BackendSpec,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub tau_ans: f64,
    #[serde(default = "default_budget_n")]
    pub budget_n: usize,
    #[serde(default = "default_concurrency_images")]
    pub concurrency_images: usize,
    #[serde(default = "default_context_limit")]
    pub context_limit_tokens: usize,
    #[serde(default)]
    pub chunk_tokens: Option<usize>,
    #[serde(default = "default_caption_instruction")]
    pub caption_instruction: String,
    #[serde(default)]
    pub prompt_paths: PromptPaths,
    #[serde(default)]
    pub filter: FilterConfig,
    /// Directory that relative prompt paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_budget_n() -> usize {
    20
}
fn default_concurrency_images() -> usize {
    4
}
fn default_context_limit() -> usize {
    16_384
}
fn default_caption_instruction() -> String {
    DEFAULT_CAPTION_INSTRUCTION.to_string()
}

#[derive(Serialize)]
struct HashedBackend<'a> {
    kind: BackendKind,
    model_id: &'a str,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct HashedKnobs<'a> {
    tau: f64,
    tau_ans: f64,
    budget_n: usize,
    context_limit_tokens: usize,
    chunk_tokens: Option<usize>,
    caption_instruction: &'a str,
    prompts: String,
    vision: HashedBackend<'a>,
    text: HashedBackend<'a>,
}

impl PipelineConfig {
    /// Both backends mocked with `seed`, everything else at defaults.
    pub fn mock(seed: u64) -> Self {
        PipelineConfig {
            vision_backend: BackendSpec::mock(seed),
            text_backend: BackendSpec::mock(seed),
            tau: 0.0,
            tau_ans: 0.0,
            budget_n: default_budget_n(),
            concurrency_images: default_concurrency_images(),
            context_limit_tokens: default_context_limit(),
            chunk_tokens: None,
            caption_instruction: default_caption_instruction(),
            prompt_paths: PromptPaths::default(),
            filter: FilterConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [("tau", self.tau), ("tau_ans", self.tau_ans)] {
            if !(v > -1.0 && v < 1.0) {
                return Err(invalid(field, format!("{v} is outside (-1, 1)")));
            }
        }
        let f = &self.filter;
        for (field, v) in [
            ("filter.complexity_min", f.complexity_min),
            ("filter.complexity_max", f.complexity_max),
        ] {
            if !v.is_finite() {
                return Err(invalid(field, "must be a finite number"));
            }
        }
        if f.complexity_min > f.complexity_max {
            return Err(invalid(
                "filter.complexity_min",
                format!(
                    "{} is greater than complexity_max {}",
                    f.complexity_min, f.complexity_max
                ),
            ));
        }
        if self.concurrency_images == 0 {
            return Err(invalid("concurrency_images", "must be at least 1"));
        }
        if self.context_limit_tokens == 0 {
            return Err(invalid("context_limit_tokens", "must be at least 1"));
        }
        if self.chunk_tokens == Some(0) {
            return Err(invalid("chunk_tokens", "must be at least 1"));
        }
        if self.caption_instruction.trim().is_empty() {
            return Err(invalid("caption_instruction", "must not be empty"));
        }
        self.vision_backend
            .validate()
            .map_err(|r| invalid("vision_backend", r))?;
        self.text_backend.validate().map_err(|r| invalid("text_backend", r))?;
        Ok(())
    }

    pub fn context_budget(&self) -> ContextBudget {
        ContextBudget {
            limit_tokens: self.context_limit_tokens,
            chunk_tokens: self.chunk_tokens,
        }
    }

    pub fn load_prompts(&self) -> Result<PromptSet, ConfigError> {
        Ok(PromptSet::load(&self.prompt_paths, &self.base_dir)?)
    }

    /// SHA-256 over every setting that changes outputs, including prompt contents.
    pub fn config_hash(&self, prompts: &PromptSet) -> String {
        fn backend(b: &BackendSpec) -> HashedBackend<'_> {
            HashedBackend {
                kind: b.kind,
                model_id: &b.model_id,
                seed: b.seed,
            }
        }
        let knobs = HashedKnobs {
            tau: self.tau,
            tau_ans: self.tau_ans,
            budget_n: self.budget_n,
            context_limit_tokens: self.context_limit_tokens,
            chunk_tokens: self.chunk_tokens,
            caption_instruction: &self.caption_instruction,
            prompts: prompts.content_hash(),
            vision: backend(&self.vision_backend),
            text: backend(&self.text_backend),
        };
        let json = serde_json::to_vec(&knobs).expect("knobs serialize");
        hex(&Sha256::digest(&json))
    }
}

/// Reads, parses and validates a config file; prompt paths resolve against its directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut cfg = PipelineConfig::parse(&text)?;
    cfg.base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    cfg.load_prompts()?;
    Ok(cfg)
}
