// scratch: decode-miss inspection on the winning schedule (debug aid)
use philstm_core::corpus::{load_dataset, preprocess, Vocab};
use philstm_core::decode::{generate_caption, generate_phrases, DecodeConfig};
use philstm_core::model::{BatchItem, ModelDims, PhiModel, UnitIds};
use philstm_core::optim::{train, TrainConfig};
use philstm_core::synth::{self, Profile};
use philstm_core::Rng;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let world = synth::generate(42, 5, Profile::Simple);
    world.write_dir(dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();

    let captions: Vec<Vec<String>> = ds.entries.iter().map(|e| preprocess(&e.caption)).collect();
    let vocab = Vocab::build(&captions, 1).unwrap();
    let items: Vec<BatchItem> = ds
        .entries
        .iter()
        .map(|e| BatchItem {
            units: e
                .chunked
                .units
                .iter()
                .map(|u| match u {
                    philstm_core::chunker::Unit::Word(w) => UnitIds::Word(vocab.id_or_unk(w)),
                    philstm_core::chunker::Unit::Phrase { words, .. } => {
                        UnitIds::Phrase(words.iter().map(|w| vocab.id_or_unk(w)).collect())
                    }
                })
                .collect(),
            feature: ds.features.get(&e.image_id).unwrap().data.clone(),
        })
        .collect();
    let dims = ModelDims { k: 16, d: ds.features.dim, v: vocab.len() };

    let model = PhiModel::new(&mut Rng::new(1), dims, 0.1, vocab.hash());
    let cfg = TrainConfig {
        learning_rate: 0.02,
        max_epochs: 500,
        weight_decay: 0.0,
        dropout_rate: 0.0,
        selection_warmup_epochs: 100,
        selection_bootstrap_epochs: 300,
        h_distractors: 4,
        ..TrainConfig::default()
    };
    let out = train(model, &items, &items, &cfg).unwrap();
    let m = &out.model;
    let dcfg = DecodeConfig::small_data();

    for e in &ds.entries {
        let feat = &ds.features.get(&e.image_id).unwrap().data;
        let outd = generate_caption(m, feat, &dcfg);
        let words: Vec<&str> = outd.word_ids.iter().map(|&id| vocab.word(id)).collect();
        let got = words.join(" ");
        if got == e.caption {
            println!("OK   {}", got);
            continue;
        }
        println!("MISS got  {:?} (norm ppl {:.4})", got, outd.log2_ppl);
        println!("     want {:?}", e.caption);
        let cands = generate_phrases(m, feat, &dcfg);
        for c in &cands {
            let cw: Vec<&str> = c.word_ids.iter().map(|&id| vocab.word(id)).collect();
            println!("     cand ppl {:.4}: {:?}", c.log2_ppl, cw.join(" "));
        }
        for u in &outd.units {
            match u {
                philstm_core::decode::DecodedUnit::Word(id) => println!("     unit word {:?}", vocab.word(*id)),
                philstm_core::decode::DecodedUnit::Phrase(ci) => {
                    let cw: Vec<&str> = outd.candidates[*ci].word_ids.iter().map(|&id| vocab.word(id)).collect();
                    println!("     unit phrase [{}] score {:.2}", cw.join(" "), outd.candidate_scores[*ci]);
                }
            }
        }
    }
}
