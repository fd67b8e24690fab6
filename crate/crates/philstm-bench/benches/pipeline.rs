use criterion::{black_box, criterion_group, criterion_main, Criterion};

use philstm_bench::bench_world;
use philstm_core::chunker::{chunk, parse_conllu};
use philstm_core::decode::{generate_caption, DecodeConfig};
use philstm_core::eval::bleu;
use philstm_core::lstm::{lstm_forward, lstm_step, LstmParams, LstmState};
use philstm_core::model::{backward_batch, forward_batch, total_cost};
use philstm_core::optim::build_distractor_plan;
use philstm_core::synth::{self, Profile};
use philstm_core::{Rng, Vector};

fn bench_lstm(c: &mut Criterion) {
    let k = 64;
    let mut rng = Rng::new(1);
    let params = LstmParams::init(&mut rng, k, 0.1);
    let inputs: Vec<Vector> = (0..12)
        .map(|_| philstm_core::linalg::init_vector(&mut rng, k, 1.0))
        .collect();
    let zeros = LstmState::zeros(k);

    c.bench_function("lstm step K=64", |b| {
        b.iter(|| lstm_step(black_box(&params), black_box(&inputs[0]), black_box(&zeros)))
    });
    c.bench_function("lstm forward 12 steps K=64", |b| {
        b.iter(|| lstm_forward(black_box(&params), black_box(&inputs), black_box(&zeros)))
    });
}

fn bench_batch(c: &mut Criterion) {
    let w = bench_world(16, 32);
    let mut rng = Rng::new(5);
    let plan = build_distractor_plan(&w.items, 2, w.model.dims.k, &mut rng);

    c.bench_function("forward batch 16 sentences K=32", |b| {
        b.iter(|| forward_batch(black_box(&w.model), black_box(&w.items), Some(&plan), None))
    });

    let fwd = forward_batch(&w.model, &w.items, Some(&plan), None);
    c.bench_function("backward batch 16 sentences K=32", |b| {
        b.iter(|| backward_batch(black_box(&w.model), black_box(&fwd), 1e-4))
    });
    c.bench_function("total cost 16 sentences", |b| {
        b.iter(|| total_cost(black_box(&w.model), black_box(&fwd), 1e-4))
    });
}

fn bench_chunk(c: &mut Criterion) {
    let world = synth::generate(11, 50, Profile::Rich);
    let text: String = world
        .pairs
        .iter()
        .map(|p| format!("{}\n\n", p.conllu))
        .collect();

    c.bench_function("parse + chunk 50 sentences", |b| {
        b.iter(|| {
            let parses = parse_conllu(black_box(&text)).unwrap();
            parses.iter().map(chunk).count()
        })
    });
}

fn bench_decode(c: &mut Criterion) {
    let w = bench_world(8, 24);
    let cfg = DecodeConfig::small_data();

    c.bench_function("generate caption K=24", |b| {
        b.iter(|| generate_caption(black_box(&w.model), black_box(&w.features[0]), &cfg))
    });
}

fn bench_bleu(c: &mut Criterion) {
    let mut rng = Rng::new(9);
    let sentence = |rng: &mut Rng| -> Vec<String> {
        (0..8 + rng.next_below(6))
            .map(|_| format!("w{}", rng.next_below(40)))
            .collect()
    };
    let candidates: Vec<Vec<String>> = (0..200).map(|_| sentence(&mut rng)).collect();
    let references: Vec<Vec<Vec<String>>> = (0..200)
        .map(|_| (0..3).map(|_| sentence(&mut rng)).collect())
        .collect();

    c.bench_function("bleu 200 candidates x 3 refs", |b| {
        b.iter(|| bleu(black_box(&candidates), black_box(&references), 4).unwrap())
    });
}

criterion_group!(benches, bench_lstm, bench_batch, bench_chunk, bench_decode, bench_bleu);
criterion_main!(benches);
