use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use futures::StreamExt;
use groundcap_core::eval::{
    budget_sweep, caption_stats, chair_input_from_captions, chair_scores, prism_answer, SynonymMap,
};
use groundcap_core::pipeline::{filter_batch, BatchOptions};
use groundcap_core::rater::rate_caption;
use groundcap_core::{load_config, CaptionRecord, ImageInput, ImageRef, Pipeline, PipelineConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "groundcap", version, about = "Grounded, detail-enriched image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate a JSONL list of {id, image}; resumes into an existing output file.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Process at most this many new images.
        #[arg(long)]
        limit: Option<usize>,
        /// Overrides budget_n.
        #[arg(long)]
        budget: Option<usize>,
        /// Overrides tau.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
    },
    /// Print per-sentence ratings of a caption as JSON.
    Rate {
        #[arg(long)]
        image: String,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
    },
    /// Drop images below the resolution floor or outside the complexity range.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Length and answer statistics over a records file.
    Stats {
        #[arg(long)]
        records: PathBuf,
    },
    /// CHAIR hallucination scores for captions against ground-truth object sets.
    EvalChair {
        /// JSONL with {id, caption} or annotate records (image_id, final_caption).
        #[arg(long)]
        captions: PathBuf,
        /// JSONL with {id, objects}.
        #[arg(long)]
        gt: PathBuf,
        /// JSON object mapping canonical names to alias lists.
        #[arg(long)]
        synonyms: PathBuf,
    },
    /// Answer questions from the final captions alone with the text model.
    Prism {
        #[arg(long)]
        records: PathBuf,
        /// JSONL with {id, question}; id refers to an image id in the records.
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Annotate one image at several budgets, reusing the caption and rating.
    Sweep {
        #[arg(long)]
        image: String,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, ascending.
        #[arg(long, value_delimiter = ',', default_values_t = [0, 4, 8, 12, 16, 20])]
        budgets: Vec<usize>,
    },
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // Output piped into `head` and friends.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn pipeline(config: &Path, tweak: impl FnOnce(&mut PipelineConfig)) -> Result<Pipeline> {
    let mut cfg = load_config(config).with_context(|| format!("loading {}", config.display()))?;
    tweak(&mut cfg);
    Ok(Pipeline::new(cfg)?)
}

/// Accepts both plain caption files and annotate output.
fn caption_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, v) in read_jsonl::<Value>(path)?.into_iter().enumerate() {
        let id = v.get("id").or_else(|| v.get("image_id")).and_then(Value::as_str);
        let caption = v
            .get("caption")
            .or_else(|| v.get("final_caption"))
            .and_then(Value::as_str);
        match (id, caption) {
            (Some(id), Some(c)) => out.push((id.to_string(), c.to_string())),
            (Some(id), None) => log::warn!("{id}: no caption, skipped"),
            _ => bail!("{}:{}: missing id", path.display(), i + 1),
        }
    }
    Ok(out)
}

async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Annotate {
            input,
            output,
            config,
            limit,
            budget,
            tau,
        } => {
            let p = pipeline(&config, |c| {
                if let Some(n) = budget {
                    c.budget_n = n;
                }
                if let Some(t) = tau {
                    c.tau = t;
                }
            })?;
            let summary = p.annotate_batch(&input, &output, BatchOptions { limit }).await?;
            print_json(&summary)
        }
        Command::Rate {
            image,
            caption,
            config,
            tau,
        } => {
            let p = pipeline(&config, |c| {
                if let Some(t) = tau {
                    c.tau = t;
                }
            })?;
            let cfg = p.config();
            let rating = rate_caption(
                p.vision(),
                &ImageRef::parse(&image),
                &cfg.caption_instruction,
                &caption,
                cfg.tau,
            )
            .await?;
            print_json(&json!({
                "tau": cfg.tau,
                "sentences": rating.sentences,
                "golden": rating.golden,
                "tokens": rating.tokens,
            }))
        }
        Command::Filter { input, output, config } => {
            let cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            print_json(&filter_batch(&input, &output, &cfg.filter)?)
        }
        Command::Stats { records } => {
            let file = File::open(&records).with_context(|| format!("opening {}", records.display()))?;
            print_json(&caption_stats(BufReader::new(file))?)
        }
        Command::EvalChair { captions, gt, synonyms } => {
            #[derive(Deserialize)]
            struct Gt {
                id: String,
                objects: BTreeSet<String>,
            }
            let captions = caption_pairs(&captions)?;
            let ground_truth: BTreeMap<String, BTreeSet<String>> =
                read_jsonl::<Gt>(&gt)?.into_iter().map(|g| (g.id, g.objects)).collect();
            let text = std::fs::read_to_string(&synonyms).with_context(|| format!("reading {}", synonyms.display()))?;
            let synonyms: SynonymMap = serde_json::from_str(&text).context("parsing synonyms")?;
            let (input, missing) = chair_input_from_captions(&captions, &ground_truth, &synonyms)?;
            let scores = chair_scores(&input)?;
            print_json(&json!({
                "chair_s": scores.chair_s,
                "chair_i": scores.chair_i,
                "counts": scores.counts,
                "missing_ground_truth": missing,
            }))
        }
        Command::Prism {
            records,
            questions,
            config,
        } => {
            #[derive(Deserialize)]
            struct Question {
                id: String,
                question: String,
            }
            let p = pipeline(&config, |_| {})?;
            let captions: BTreeMap<String, String> = read_jsonl::<CaptionRecord>(&records)?
                .into_iter()
                .filter_map(|r| Some((r.image_id, r.final_caption?)))
                .collect();
            let questions: Vec<Question> = read_jsonl(&questions)?;
            let template = &p.prompts().prism_answer;
            let answers: Vec<Value> = futures::stream::iter(questions)
                .map(|q| {
                    let (p, captions) = (&p, &captions);
                    async move {
                        let result = match captions.get(&q.id) {
                            None => Err("no final caption for this id".to_string()),
                            Some(c) => prism_answer(p.text(), template, c, &q.question)
                                .await
                                .map_err(|e| e.to_string()),
                        };
                        match result {
                            Ok(a) => json!({"id": q.id, "question": q.question, "answer": a}),
                            Err(e) => json!({"id": q.id, "question": q.question, "error": e}),
                        }
                    }
                })
                .buffered(p.config().concurrency_images.max(1))
                .collect()
                .await;
            print_json(&answers)
        }
        Command::Sweep { image, config, budgets } => {
            let p = pipeline(&config, |_| {})?;
            let runs = budget_sweep(&p, &ImageInput::new(image.clone(), image), &budgets).await?;
            let rows: Vec<Value> = runs
                .iter()
                .map(|(n, r)| {
                    json!({
                        "budget_n": n,
                        "status": r.status,
                        "instructions": r.instructions.len(),
                        "answers_kept": r.kept_answers(),
                        "answers_excluded": r.excluded_answers(),
                        "final_chars": r.final_caption.as_deref().map(|c| c.chars().count()),
                    })
                })
                .collect();
            print_json(&rows)
        }
    }
}

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()).await {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
