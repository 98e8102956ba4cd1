//! Grounded, detail-enriched image captioning.
//!
//! The pipeline drafts a caption with a vision-language model, keeps only the
//! sentences whose content words become more likely when the image is shown
//! (contrastive sentence rating), asks budgeted follow-up questions about the
//! objects in those sentences, filters the answers the same way, and finally
//! has a text model merge everything into one caption.
//!
//! Modules map onto the stages:
//!
//! - [`gateway`]: backend contract, OpenAI-compatible HTTP client, deterministic mock.
//! - [`rater`]: paired token probabilities, sentence segmentation, golden-sentence selection.
//! - [`qa`]: object/position instruction generation, budgeted scheduling, detail collection.
//! - [`integrate`]: object/position summaries and the final caption.
//! - [`pipeline`]: per-image orchestration, batch annotation with resume, dataset filter.
//! - [`eval`]: CHAIR metrics, caption statistics, caption-only question answering, budget sweeps.

pub mod config;
pub mod eval;
pub mod gateway;
pub mod integrate;
pub mod pipeline;
pub mod prompts;
pub mod qa;
pub mod rater;
pub mod text;

pub use config::{load_config, ConfigError, FilterConfig, PipelineConfig};
pub use gateway::{
    Backend, BackendKind, BackendSpec, Gateway, GatewayError, ImageRef, ImageSource, PromptKind, PromptParts,
    ScoredContinuation,
};
pub use integrate::{IntegrationPrompts, IntegrationResult};
pub use pipeline::{CaptionRecord, ImageInput, Pipeline, RecordStatus};
pub use qa::{Budget, DetailAnswer, Instruction, InstructionKind};
pub use rater::{GoldenSentenceSet, RatedSentence, TokenScore};
