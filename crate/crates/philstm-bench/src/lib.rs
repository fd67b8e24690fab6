//! Shared fixtures for the pipeline benchmarks.

use philstm_core::corpus::{preprocess, Vocab};
use philstm_core::model::{BatchItem, ModelDims, PhiModel};
use philstm_core::synth::{self, Profile};
use philstm_core::{Rng, Vector};

pub struct BenchWorld {
    pub model: PhiModel,
    pub items: Vec<BatchItem>,
    pub features: Vec<Vector>,
    pub vocab: Vocab,
}

/// A seeded world with a freshly initialized model, ready for forward,
/// backward and decode benchmarks.
pub fn bench_world(pairs: usize, k: usize) -> BenchWorld {
    let world = synth::generate(7, pairs, Profile::Rich);
    let tokenized: Vec<Vec<String>> = world.pairs.iter().map(|p| preprocess(&p.caption)).collect();
    let vocab = Vocab::build(&tokenized, 1).expect("vocab");

    let items: Vec<BatchItem> = world
        .pairs
        .iter()
        .map(|p| {
            let parse = &philstm_core::chunker::parse_conllu(&p.conllu).expect("parse")[0];
            let chunked = philstm_core::chunker::chunk(parse);
            BatchItem::from_chunked(&chunked, &vocab, p.feature.clone())
        })
        .collect();
    let features = world.pairs.iter().map(|p| p.feature.clone()).collect();

    let dims = ModelDims {
        k,
        d: world.dim,
        v: vocab.len(),
    };
    let model = PhiModel::new(&mut Rng::new(3), dims, 0.1, vocab.hash());
    BenchWorld {
        model,
        items,
        features,
        vocab,
    }
}
