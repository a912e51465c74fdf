//! Benchmarks for the hot kernels: BM25 scoring, ROUGE-L, dense scan, and
//! the sentence splitter.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use privleak_core::access::SelectionStrategy;
use privleak_core::atomize::{sentence_fallback, AtomizedDataset, Claim};
use privleak_core::link::{build_claim_index, link, IndexKind, LinkMode};
use privleak_core::providers::mocks::HashEmbed;
use privleak_core::providers::EmbedProvider;
use privleak_core::rng::SplitMix64;
use privleak_core::score::rouge_l;
use privleak_core::AuxiliaryInfo;
use std::sync::Arc;

const VOCAB: &[&str] = &[
    "patient", "presents", "with", "acute", "chest", "pain", "history", "pulse", "pressure",
    "examination", "reveals", "tenderness", "fever", "cough", "fatigue", "nausea", "oriented",
    "laboratory", "elevated", "count", "normal", "limits", "denies", "alcohol", "tobacco",
    "monitor", "discharge", "admitted", "ward", "treatment",
];

fn synth_text(rng: &mut SplitMix64, words: usize) -> String {
    (0..words)
        .map(|_| VOCAB[rng.next_below(VOCAB.len() as u64) as usize])
        .collect::<Vec<_>>()
        .join(" ")
}

fn synth_corpus(docs: usize, claims_per_doc: usize) -> AtomizedDataset {
    let mut rng = SplitMix64::new(7);
    let mut claims = Vec::new();
    for d in 0..docs {
        for c in 0..claims_per_doc {
            claims.push(Claim {
                record_id: format!("r{d:03}"),
                index: c as u32,
                text: synth_text(&mut rng, 10),
            });
        }
    }
    AtomizedDataset {
        dataset_name: "bench".into(),
        claims,
    }
}

fn bench_bm25_link(c: &mut Criterion) {
    let corpus = synth_corpus(100, 8);
    let index = build_claim_index(&corpus, IndexKind::Bm25, None).unwrap();
    let mut rng = SplitMix64::new(11);
    let aux = AuxiliaryInfo {
        record_id: "r000".into(),
        claims: (0..3).map(|_| synth_text(&mut rng, 10)).collect(),
        source_indices: vec![0, 1, 2],
        strategy: SelectionStrategy::RandomK,
        k: 3,
        seed: 0,
        paraphrased: false,
    };
    c.bench_function("bm25_link_800_claims", |b| {
        b.iter(|| link(black_box(&aux), &index, LinkMode::PerClaimMajority, None).unwrap())
    });
}

fn bench_dense_link(c: &mut Criterion) {
    let corpus = synth_corpus(100, 8);
    let embed = EmbedProvider::new(Arc::new(HashEmbed::default()));
    let index = build_claim_index(&corpus, IndexKind::Dense, Some(&embed)).unwrap();
    let mut rng = SplitMix64::new(13);
    let aux = AuxiliaryInfo {
        record_id: "r000".into(),
        claims: (0..3).map(|_| synth_text(&mut rng, 10)).collect(),
        source_indices: vec![0, 1, 2],
        strategy: SelectionStrategy::RandomK,
        k: 3,
        seed: 0,
        paraphrased: false,
    };
    c.bench_function("dense_link_800_claims", |b| {
        b.iter(|| link(black_box(&aux), &index, LinkMode::PerClaimMajority, Some(&embed)).unwrap())
    });
}

fn bench_rouge_l(c: &mut Criterion) {
    let mut rng = SplitMix64::new(17);
    let a = synth_text(&mut rng, 150);
    let b = synth_text(&mut rng, 150);
    c.bench_function("rouge_l_150x150_tokens", |bench| {
        bench.iter(|| rouge_l(black_box(&a), black_box(&b)))
    });
}

fn bench_sentence_split(c: &mut Criterion) {
    let mut rng = SplitMix64::new(19);
    let text: String = (0..20)
        .map(|_| format!("{}.", synth_text(&mut rng, 12)))
        .collect::<Vec<_>>()
        .join(" ");
    c.bench_function("sentence_split_20_sentences", |b| {
        b.iter(|| sentence_fallback(black_box(&text)))
    });
}

criterion_group!(
    benches,
    bench_bm25_link,
    bench_dense_link,
    bench_rouge_l,
    bench_sentence_split
);
criterion_main!(benches);
