//! Per-image orchestration, batch annotation with resume, and the dataset
//! pre-filter.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use tokio::io::AsyncWriteExt;

use crate::config::{ConfigError, FilterConfig, PipelineConfig};
use crate::gateway::{Gateway, GatewayError, ImageRef, ImageSource};
use crate::integrate::{
    compose_final_caption, integrate_object_details, integrate_position_details, IntegrationPrompts,
};
use crate::prompts::PromptSet;
use crate::qa::{
    collect_details, derive_position_instructions, raise_object_instructions, schedule_instructions, usable_details,
    Budget, DetailAnswer, Instruction, InstructionKind, RaisedInstructions,
};
use crate::rater::{rate_caption, GoldenSentenceSet, RatedSentence};

/// Monotonic time source for stage timings.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Always reports zero, so records are reproducible byte for byte.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenerateCaption,
    RateCaption,
    RaiseInstructions,
    CollectDetails,
    IntegrateObject,
    IntegratePosition,
    ComposeFinal,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenerateCaption,
        Stage::RateCaption,
        Stage::RaiseInstructions,
        Stage::CollectDetails,
        Stage::IntegrateObject,
        Stage::IntegratePosition,
        Stage::ComposeFinal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenerateCaption => "generate_caption",
            Stage::RateCaption => "rate_caption",
            Stage::RaiseInstructions => "raise_instructions",
            Stage::CollectDetails => "collect_details",
            Stage::IntegrateObject => "integrate_object",
            Stage::IntegratePosition => "integrate_position",
            Stage::ComposeFinal => "compose_final",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// `ok` or `failed:<stage>` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordStatus {
    Ok,
    Failed(Stage),
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordStatus::Ok => f.write_str("ok"),
            RecordStatus::Failed(s) => write!(f, "failed:{s}"),
        }
    }
}

impl FromStr for RecordStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ok" => Ok(RecordStatus::Ok),
            _ => s
                .strip_prefix("failed:")
                .ok_or_else(|| format!("unknown status `{s}`"))?
                .parse()
                .map(RecordStatus::Failed),
        }
    }
}

impl Serialize for RecordStatus {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RecordStatus {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One line of batch input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInput {
    pub id: String,
    /// File path, http(s) URL or `data:` URL.
    pub image: String,
}

impl ImageInput {
    pub fn new(id: impl Into<String>, image: impl Into<String>) -> Self {
        ImageInput {
            id: id.into(),
            image: image.into(),
        }
    }
}

/// Everything the pipeline produced for one image, including intermediates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub image_ref: ImageRef,
    pub initial_caption: Option<String>,
    pub caption_ratings: Vec<RatedSentence>,
    pub golden: Option<GoldenSentenceSet>,
    pub instructions: Vec<Instruction>,
    pub answers: Vec<DetailAnswer>,
    pub c_object: Option<String>,
    pub c_position: Option<String>,
    pub final_caption: Option<String>,
    /// Milliseconds per stage.
    pub stage_timings: BTreeMap<String, u64>,
    pub config_hash: String,
    pub status: RecordStatus,
    pub error: Option<String>,
}

impl CaptionRecord {
    fn new(input: &ImageInput, config_hash: &str) -> Self {
        CaptionRecord {
            image_id: input.id.clone(),
            image_ref: ImageRef::parse(&input.image),
            initial_caption: None,
            caption_ratings: Vec::new(),
            golden: None,
            instructions: Vec::new(),
            answers: Vec::new(),
            c_object: None,
            c_position: None,
            final_caption: None,
            stage_timings: BTreeMap::new(),
            config_hash: config_hash.to_string(),
            status: RecordStatus::Ok,
            error: None,
        }
    }

    fn fail(&mut self, stage: Stage, err: impl fmt::Display) {
        log::warn!("image {}: stage {stage} failed: {err}", self.image_id);
        self.status = RecordStatus::Failed(stage);
        self.error = Some(err.to_string());
    }

    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }

    pub fn kept_answers(&self) -> usize {
        self.answers.iter().filter(|a| !a.excluded).count()
    }

    pub fn excluded_answers(&self) -> usize {
        self.answers.len() - self.kept_answers()
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("record serializes");
        s.push('\n');
        s
    }
}

/// Budget-independent stages of one image, reusable across budgets.
#[derive(Debug, Clone)]
pub struct Prepared {
    record: CaptionRecord,
    raised: RaisedInstructions,
}

impl Prepared {
    pub fn record(&self) -> &CaptionRecord {
        &self.record
    }

    pub fn raised(&self) -> &RaisedInstructions {
        &self.raised
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("I/O error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchOptions {
    /// Process at most this many new images.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub ok: usize,
    pub failed: usize,
    pub skipped_resume: usize,
    pub skipped_duplicate: usize,
    pub malformed: usize,
    /// Images still pending because of `limit`.
    pub deferred: usize,
    pub peak_in_flight: usize,
}

pub struct Pipeline {
    config: PipelineConfig,
    prompts: PromptSet,
    integration: IntegrationPrompts,
    vision: Gateway,
    text: Gateway,
    clock: Arc<dyn Clock>,
    config_hash: String,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("config_hash", &self.config_hash)
            .field("vision", &self.vision)
            .field("text", &self.text)
            .finish()
    }
}

impl Pipeline {
    /// Builds both gateways from the config's backend specs.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let vision = Gateway::from_spec(&config.vision_backend)?;
        let text = Gateway::from_spec(&config.text_backend)?;
        let prompts = config.load_prompts()?;
        Self::with_gateways(config, prompts, vision, text)
    }

    pub fn with_gateways(
        config: PipelineConfig,
        prompts: PromptSet,
        vision: Gateway,
        text: Gateway,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        prompts.validate().map_err(ConfigError::from)?;
        let config_hash = config.config_hash(&prompts);
        Ok(Pipeline {
            integration: IntegrationPrompts::from_set(&prompts),
            config,
            prompts,
            vision,
            text,
            clock: Arc::new(SystemClock::default()),
            config_hash,
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn vision(&self) -> &Gateway {
        &self.vision
    }

    pub fn text(&self) -> &Gateway {
        &self.text
    }

    async fn timed<T>(&self, fut: impl Future<Output = T>) -> (T, u64) {
        let start = self.clock.now();
        let out = fut.await;
        let ms = self.clock.now().saturating_sub(start).as_millis();
        (out, u64::try_from(ms).unwrap_or(u64::MAX))
    }

    /// Runs the whole pipeline for one image. Never fails: errors end up in the record status.
    pub async fn annotate_image(&self, input: &ImageInput) -> CaptionRecord {
        let budget_n = self.config.budget_n;
        let prepared = self.prepare(input, budget_n > 0).await;
        self.finish(&prepared, budget_n).await
    }

    /// Caption, rating and instruction raising. With `raise = false` no instructions are requested.
    pub async fn prepare(&self, input: &ImageInput, raise: bool) -> Prepared {
        let mut rec = CaptionRecord::new(input, &self.config_hash);
        let mut raised = RaisedInstructions::default();
        let image = rec.image_ref.clone();
        let instruction = self.config.caption_instruction.as_str();

        let (caption, ms) = self.timed(self.vision.generate_caption(&image, instruction)).await;
        rec.stage_timings.insert(Stage::GenerateCaption.to_string(), ms);
        let caption = match caption {
            Ok(c) if !c.trim().is_empty() => c,
            Ok(_) => {
                rec.fail(Stage::GenerateCaption, GatewayError::EmptyResponse);
                return Prepared { record: rec, raised };
            }
            Err(e) => {
                rec.fail(Stage::GenerateCaption, e);
                return Prepared { record: rec, raised };
            }
        };
        rec.initial_caption = Some(caption.clone());

        let (rating, ms) = self
            .timed(rate_caption(
                &self.vision,
                &image,
                instruction,
                &caption,
                self.config.tau,
            ))
            .await;
        rec.stage_timings.insert(Stage::RateCaption.to_string(), ms);
        let golden = match rating {
            Ok(r) => {
                rec.caption_ratings = r.sentences;
                r.golden
            }
            Err(e) => {
                rec.fail(Stage::RateCaption, e);
                return Prepared { record: rec, raised };
            }
        };
        rec.golden = Some(golden.clone());

        let ms = if raise {
            let (r, ms) = self
                .timed(raise_object_instructions(
                    &self.text,
                    &golden,
                    &self.prompts.instruction_generation,
                ))
                .await;
            match r {
                Ok(r) => raised = r,
                Err(e) => {
                    rec.stage_timings.insert(Stage::RaiseInstructions.to_string(), ms);
                    rec.fail(Stage::RaiseInstructions, e);
                    return Prepared { record: rec, raised };
                }
            }
            ms
        } else {
            0
        };
        rec.stage_timings.insert(Stage::RaiseInstructions.to_string(), ms);
        Prepared { record: rec, raised }
    }

    /// Scheduling, detail collection and integration for budget `budget_n`.
    pub async fn finish(&self, prepared: &Prepared, budget_n: usize) -> CaptionRecord {
        let mut rec = prepared.record.clone();
        if !rec.is_ok() {
            return rec;
        }
        let golden = rec.golden.clone().expect("ok record has a golden set");
        let objects = &prepared.raised.per_sentence;
        let positions: Vec<Vec<Instruction>> = objects.iter().map(|s| derive_position_instructions(s)).collect();
        let scheduled = schedule_instructions(objects, &positions, Budget::new(budget_n));

        let (answers, ms) = self
            .timed(collect_details(
                &self.vision,
                &rec.image_ref,
                &scheduled,
                self.config.tau_ans,
                &self.prompts.visual_answer,
            ))
            .await;
        rec.stage_timings.insert(Stage::CollectDetails.to_string(), ms);
        rec.instructions = scheduled;
        rec.answers = answers;

        let d_o = usable_details(&rec.answers, InstructionKind::Object);
        let d_p = usable_details(&rec.answers, InstructionKind::Position);
        let budget = self.config.context_budget();
        let ((c_o, ms_o), (c_p, ms_p)) = tokio::join!(
            self.timed(integrate_object_details(
                &self.text,
                &golden,
                &d_o,
                &self.integration,
                budget
            )),
            self.timed(integrate_position_details(
                &self.text,
                &golden,
                &d_p,
                &self.integration,
                budget
            )),
        );
        rec.stage_timings.insert(Stage::IntegrateObject.to_string(), ms_o);
        rec.stage_timings.insert(Stage::IntegratePosition.to_string(), ms_p);
        let c_o = match c_o {
            Ok(s) => s.text,
            Err(e) => {
                rec.fail(Stage::IntegrateObject, e);
                return rec;
            }
        };
        rec.c_object = Some(c_o.clone());
        let c_p = match c_p {
            Ok(s) => s.text,
            Err(e) => {
                rec.fail(Stage::IntegratePosition, e);
                return rec;
            }
        };
        rec.c_position = Some(c_p.clone());

        let (f, ms) = self
            .timed(compose_final_caption(
                &self.text,
                &golden,
                &c_o,
                &c_p,
                &self.integration,
                budget,
            ))
            .await;
        rec.stage_timings.insert(Stage::ComposeFinal.to_string(), ms);
        match f {
            Ok(f) => rec.final_caption = Some(f),
            Err(e) => rec.fail(Stage::ComposeFinal, e),
        }
        rec
    }

    /// Annotates every image of a JSONL file, appending records to `output`.
    ///
    /// Ids already present in `output` are skipped, so an interrupted run can be
    /// restarted with the same arguments. An incomplete trailing line left by an
    /// interrupted write is removed first. Records are written in completion order.
    pub async fn annotate_batch(
        &self,
        input: &Path,
        output: &Path,
        opts: BatchOptions,
    ) -> Result<BatchSummary, PipelineError> {
        let mut summary = BatchSummary::default();
        let done = prepare_output(output).await?;
        let text = tokio::fs::read_to_string(input).await.map_err(io_err(input))?;

        let mut seen = HashSet::new();
        let mut todo = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: ImageInput = match serde_json::from_str(line) {
                Ok(i) => i,
                Err(e) => {
                    log::warn!("{}:{}: skipping malformed line: {e}", input.display(), n + 1);
                    summary.malformed += 1;
                    continue;
                }
            };
            if done.contains(&item.id) {
                summary.skipped_resume += 1;
            } else if !seen.insert(item.id.clone()) {
                log::warn!("{}:{}: duplicate id {}", input.display(), n + 1, item.id);
                summary.skipped_duplicate += 1;
            } else {
                todo.push(item);
            }
        }
        if let Some(limit) = opts.limit {
            if todo.len() > limit {
                summary.deferred = todo.len() - limit;
                todo.truncate(limit);
            }
        }

        let mut out = tokio::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(output)
            .await
            .map_err(io_err(output))?;
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let mut records = stream::iter(todo.iter())
            .map(|item| {
                let (in_flight, peak) = (&in_flight, &peak);
                async move {
                    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    let rec = self.annotate_image(item).await;
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                    rec
                }
            })
            .buffer_unordered(self.config.concurrency_images.max(1));
        while let Some(rec) = records.next().await {
            if rec.is_ok() {
                summary.ok += 1;
            } else {
                summary.failed += 1;
            }
            out.write_all(rec.to_json_line().as_bytes())
                .await
                .map_err(io_err(output))?;
            out.flush().await.map_err(io_err(output))?;
        }
        summary.peak_in_flight = peak.load(Ordering::SeqCst);
        Ok(summary)
    }
}

/// Ids already recorded in `output`; truncates an unterminated last line.
async fn prepare_output(output: &Path) -> Result<HashSet<String>, PipelineError> {
    let mut done = HashSet::new();
    let text = match tokio::fs::read_to_string(output).await {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(io_err(output)(e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() < text.len() {
        log::warn!("{}: dropping incomplete trailing line", output.display());
        let f = tokio::fs::OpenOptions::new()
            .write(true)
            .open(output)
            .await
            .map_err(io_err(output))?;
        f.set_len(complete.len() as u64).await.map_err(io_err(output))?;
    }
    #[derive(Deserialize)]
    struct Id {
        image_id: String,
    }
    for line in complete.lines() {
        match serde_json::from_str::<Id>(line) {
            Ok(r) => {
                done.insert(r.image_id);
            }
            Err(e) => log::warn!("{}: ignoring unreadable record: {e}", output.display()),
        }
    }
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Resolution,
    Complexity,
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum FilterDecision {
    Keep {
        score: Option<f64>,
        /// The complexity hook failed and the image was kept anyway.
        hook_failed: bool,
    },
    Drop {
        reason: DropReason,
        score: Option<f64>,
    },
}

impl FilterDecision {
    pub fn is_keep(&self) -> bool {
        matches!(self, FilterDecision::Keep { .. })
    }
}

/// What the filter needs to know about an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
    /// Local file handed to the complexity hook.
    pub path: Option<PathBuf>,
}

/// Runs the hook command (whitespace-split, image path appended) and parses its stdout as one number.
pub fn run_complexity_hook(command: &str, image: &Path) -> Result<f64, String> {
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or("empty hook command")?;
    let out = std::process::Command::new(program)
        .args(parts)
        .arg(image)
        .output()
        .map_err(|e| format!("cannot run `{program}`: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "hook exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let score: f64 = stdout
        .trim()
        .parse()
        .map_err(|_| format!("hook printed `{}`, expected a number", stdout.trim()))?;
    if score.is_finite() {
        Ok(score)
    } else {
        Err(format!("hook printed non-finite score {score}"))
    }
}

/// Resolution check, then the optional complexity hook. Bounds are inclusive; hook failures keep the image.
pub fn filter_image(meta: &ImageMeta, cfg: &FilterConfig) -> FilterDecision {
    if meta.width.min(meta.height) < cfg.min_short_edge {
        return FilterDecision::Drop {
            reason: DropReason::Resolution,
            score: None,
        };
    }
    let Some(hook) = cfg.complexity_hook.as_deref() else {
        return FilterDecision::Keep {
            score: None,
            hook_failed: false,
        };
    };
    let result = match &meta.path {
        Some(p) => run_complexity_hook(hook, p),
        None => Err("image has no local path".to_string()),
    };
    match result {
        Ok(s) if (cfg.complexity_min..=cfg.complexity_max).contains(&s) => FilterDecision::Keep {
            score: Some(s),
            hook_failed: false,
        },
        Ok(s) => FilterDecision::Drop {
            reason: DropReason::Complexity,
            score: Some(s),
        },
        Err(e) => {
            log::warn!("complexity hook failed, keeping image: {e}");
            FilterDecision::Keep {
                score: None,
                hook_failed: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub kept: usize,
    pub dropped_resolution: usize,
    pub dropped_complexity: usize,
    pub dropped_unreadable: usize,
    pub hook_failures: usize,
    pub malformed: usize,
}

/// Filters a JSONL image list, writing the kept lines to `output`.
pub fn filter_batch(input: &Path, output: &Path, cfg: &FilterConfig) -> Result<FilterSummary, PipelineError> {
    let text = std::fs::read_to_string(input).map_err(io_err(input))?;
    let mut summary = FilterSummary::default();
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let Ok(item) = serde_json::from_str::<ImageInput>(line) else {
            summary.malformed += 1;
            continue;
        };
        let image = ImageRef::parse(&item.image);
        let decision = match image.probe_dimensions() {
            Ok((width, height)) => {
                let path = match &image.source {
                    ImageSource::Path(p) => Some(p.clone()),
                    _ => None,
                };
                filter_image(&ImageMeta { width, height, path }, cfg)
            }
            Err(e) => {
                log::warn!("{}: {e}", item.id);
                FilterDecision::Drop {
                    reason: DropReason::Unreadable,
                    score: None,
                }
            }
        };
        match decision {
            FilterDecision::Keep { hook_failed, .. } => {
                summary.kept += 1;
                summary.hook_failures += usize::from(hook_failed);
                kept.push_str(line.trim());
                kept.push('\n');
            }
            FilterDecision::Drop { reason, .. } => match reason {
                DropReason::Resolution => summary.dropped_resolution += 1,
                DropReason::Complexity => summary.dropped_complexity += 1,
                DropReason::Unreadable => summary.dropped_unreadable += 1,
            },
        }
    }
    std::fs::write(output, kept).map_err(io_err(output))?;
    Ok(summary)
}
