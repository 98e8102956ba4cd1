use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use groundcap_core::gateway::mock_tokenize;
use groundcap_core::qa::{derive_position_instructions, schedule_instructions};
use groundcap_core::rater::{pair_scores, rate_and_select, segment_sentences};
use groundcap_core::{Budget, ImageInput, Instruction, InstructionKind, Pipeline, PipelineConfig};

fn long_caption(sentences: usize) -> String {
    (0..sentences)
        .map(|i| format!("A wooden table {i} stands beside the red bicycle near a sleeping dog."))
        .collect::<Vec<_>>()
        .join(" ")
}

fn rating(c: &mut Criterion) {
    let caption = long_caption(40);
    let tokens = mock_tokenize(&caption);
    let n = tokens.len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
    let wo: Vec<f64> = (0..n).map(|i| ((i * 53) % 100) as f64 / 100.0).collect();
    let scores = pair_scores(tokens, &w, &wo).unwrap();
    let spans = segment_sentences(&caption, &scores);

    c.bench_function("segment_sentences/40", |b| {
        b.iter(|| segment_sentences(black_box(&caption), &scores))
    });
    c.bench_function("rate_and_select/40", |b| {
        b.iter(|| rate_and_select(black_box(&spans), &scores, 0.0))
    });
    c.bench_function("mock_tokenize/40", |b| b.iter(|| mock_tokenize(black_box(&caption))));
}

fn scheduling(c: &mut Criterion) {
    let objects: Vec<Vec<Instruction>> = (0..50)
        .map(|k| {
            (0..5)
                .map(|i| Instruction {
                    kind: InstructionKind::Object,
                    text: format!("Describe more details about the thing-{k}-{i}."),
                    target_object: format!("thing-{k}-{i}"),
                    source_sentence_index: k,
                    ordinal: 0,
                })
                .collect()
        })
        .collect();
    let positions: Vec<Vec<Instruction>> = objects.iter().map(|s| derive_position_instructions(s)).collect();
    c.bench_function("schedule_instructions/500", |b| {
        b.iter(|| schedule_instructions(black_box(&objects), &positions, Budget::new(20)))
    });
}

fn end_to_end(c: &mut Criterion) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let pipeline = Pipeline::new(PipelineConfig::mock(7)).unwrap();
    let mut i = 0u64;
    c.bench_function("annotate_image/mock", |b| {
        b.iter_batched(
            || {
                i += 1;
                ImageInput::new(format!("img-{i}"), format!("img-{i}"))
            },
            |input| rt.block_on(pipeline.annotate_image(&input)),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, rating, scheduling, end_to_end);
criterion_main!(benches);
