use acpo_bench::responses;
use acpo_core::analysis::{analyze_question, atomize_responses};
use acpo_core::clustering::ClusteringConfig;
use acpo_core::embedding::{embed_facts, OfflineHashEmbedder};
use acpo_core::scoring::ScoringConfig;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn stages(c: &mut Criterion) {
    let rs = responses("q", 30, 8, 1);
    let embedder = OfflineHashEmbedder::new(64, 0);
    let (facts, _) = atomize_responses(&rs);
    let kept: Vec<_> = facts.iter().filter(|f| !f.excluded).cloned().collect();

    c.bench_function("atomize_30x8", |b| b.iter(|| atomize_responses(black_box(&rs))));
    c.bench_function("embed_offline_240", |b| {
        b.iter(|| embed_facts(black_box(&kept), &embedder).expect("embeds"))
    });
    c.bench_function("analyze_question_30x8", |b| {
        b.iter(|| {
            analyze_question(
                black_box(&rs),
                &embedder,
                &ClusteringConfig::default(),
                &ScoringConfig::default(),
            )
            .expect("analyzes")
        })
    });
}

criterion_group!(benches, stages);
criterion_main!(benches);
