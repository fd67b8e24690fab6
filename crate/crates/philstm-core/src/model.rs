//! The two-level phrase/sentence model: shared word embedding, per-level
//! image embeddings and LSTMs, per-level output projections, and the
//! phrase-selection classifier.
//!
//! A phrase of L words is encoded by the phrase-level LSTM over the input
//! schedule (image vector, phrase start token, word vectors); the hidden
//! state after the last word is the compositional phrase vector z. The
//! sentence level consumes (image vector, sentence start token, units...)
//! where each unit is either a word vector or a phrase's z. Scored targets
//! are the next word (or the reserved phrase token when the next unit is a
//! phrase) and an end token at each level; the cost is the summed negative
//! log2 probability of all targets plus a classifier loss that separates
//! the true phrase vector from sampled distractors at every phrase step.

use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::{ID_END_PHRASE, ID_END_SENT, ID_PHRASE_TOKEN};
use crate::error::{Error, Result};
use crate::linalg::{
    init_params, init_vector, log_softmax, matvec, matvec_t, sigmoid, Mat, Rng, Vector,
};
use crate::lstm::{lstm_step, step_backward, LstmParams, LstmState, StepCache};
use crate::optim::dropout_mask;

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Embedding / hidden dimension.
    pub k: usize,
    /// Image feature dimension.
    pub d: usize,
    /// Vocabulary size including reserved tokens.
    pub v: usize,
}

/// Every trainable parameter. The same struct doubles as the gradient and
/// optimizer-state container; `field_slices` fixes the canonical order used
/// by the optimizer, the finite-difference checks and the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// K x V word embedding; column i embeds word id i.
    pub w_e: Mat,
    /// K x D phrase-level image embedding with bias.
    pub w_ip: Mat,
    pub b_ip: Vector,
    /// K x D sentence-level image embedding with bias.
    pub w_is: Mat,
    pub b_is: Vector,
    pub lstm_p: LstmParams,
    pub lstm_s: LstmParams,
    /// V x K output projections with biases, one per level.
    pub w_dp: Mat,
    pub b_dp: Vector,
    pub w_ds: Mat,
    pub b_ds: Vector,
    /// Phrase-selection classifier direction.
    pub w_ps: Vector,
    /// Learned start-of-phrase and start-of-sentence input vectors.
    pub x_sp: Vector,
    pub x_ss: Vector,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> ModelParams {
        let ModelDims { k, d, v } = dims;
        ModelParams {
            w_e: Mat::zeros(k, v),
            w_ip: Mat::zeros(k, d),
            b_ip: Vector::zeros(k),
            w_is: Mat::zeros(k, d),
            b_is: Vector::zeros(k),
            lstm_p: LstmParams::zeros(k),
            lstm_s: LstmParams::zeros(k),
            w_dp: Mat::zeros(v, k),
            b_dp: Vector::zeros(v),
            w_ds: Mat::zeros(v, k),
            b_ds: Vector::zeros(v),
            w_ps: Vector::zeros(k),
            x_sp: Vector::zeros(k),
            x_ss: Vector::zeros(k),
        }
    }

    /// Weights uniform in [-scale, scale]; biases and the selection
    /// classifier start at zero. A neutral classifier scores every candidate
    /// sigma(1) at the outset, which keeps the selection objective from
    /// saturating into a reject-everything equilibrium before the phrase
    /// vectors become separable.
    pub fn init(rng: &mut Rng, dims: ModelDims, scale: f64) -> ModelParams {
        let ModelDims { k, d, v } = dims;
        ModelParams {
            w_e: init_params(rng, k, v, scale),
            w_ip: init_params(rng, k, d, scale),
            b_ip: Vector::zeros(k),
            w_is: init_params(rng, k, d, scale),
            b_is: Vector::zeros(k),
            lstm_p: LstmParams::init(rng, k, scale),
            lstm_s: LstmParams::init(rng, k, scale),
            w_dp: init_params(rng, v, k, scale),
            b_dp: Vector::zeros(v),
            w_ds: init_params(rng, v, k, scale),
            b_ds: Vector::zeros(v),
            w_ps: Vector::zeros(k),
            x_sp: init_vector(rng, k, scale),
            x_ss: init_vector(rng, k, scale),
        }
    }

    /// Canonical parameter order: w_e, w_ip, b_ip, w_is, b_is, lstm_p
    /// (W_i W_f W_o W_u U_i U_f U_o U_u), lstm_s (same), w_dp, b_dp,
    /// w_ds, b_ds, w_ps, x_sp, x_ss.
    pub fn field_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.w_e.data(),
            self.w_ip.data(),
            &self.b_ip.0,
            self.w_is.data(),
            &self.b_is.0,
        ];
        out.extend(self.lstm_p.mats().into_iter().map(|m| m.data()));
        out.extend(self.lstm_s.mats().into_iter().map(|m| m.data()));
        out.extend([
            self.w_dp.data(),
            &self.b_dp.0[..],
            self.w_ds.data(),
            &self.b_ds.0[..],
            &self.w_ps.0[..],
            &self.x_sp.0[..],
            &self.x_ss.0[..],
        ]);
        out
    }

    pub fn field_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.w_e.data_mut(),
            self.w_ip.data_mut(),
            &mut self.b_ip.0,
            self.w_is.data_mut(),
            &mut self.b_is.0,
        ];
        out.extend(self.lstm_p.mats_mut().into_iter().map(|m| m.data_mut()));
        out.extend(self.lstm_s.mats_mut().into_iter().map(|m| m.data_mut()));
        out.push(self.w_dp.data_mut());
        out.push(&mut self.b_dp.0);
        out.push(self.w_ds.data_mut());
        out.push(&mut self.b_ds.0);
        out.push(&mut self.w_ps.0);
        out.push(&mut self.x_sp.0);
        out.push(&mut self.x_ss.0);
        out
    }

    pub fn param_count(&self) -> usize {
        self.field_slices().iter().map(|s| s.len()).sum()
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for s in self.field_slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("flat parameter index {} out of range", index);
    }

    pub fn add_flat(&mut self, index: usize, delta: f64) {
        let mut i = index;
        for s in self.field_slices_mut() {
            if i < s.len() {
                s[i] += delta;
                return;
            }
            i -= s.len();
        }
        panic!("flat parameter index {} out of range", index);
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.field_slices_mut().into_iter().zip(other.field_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.field_slices_mut().into_iter().zip(other.field_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for sl in self.field_slices_mut() {
            for x in sl {
                *x *= s;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.field_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|&x| x * x)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.field_slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Model dimensions, vocabulary fingerprint and parameters.
#[derive(Clone, Debug)]
pub struct PhiModel {
    pub dims: ModelDims,
    pub vocab_hash: [u8; 32],
    pub p: ModelParams,
}

impl PhiModel {
    pub fn new(rng: &mut Rng, dims: ModelDims, scale: f64, vocab_hash: [u8; 32]) -> PhiModel {
        PhiModel {
            dims,
            vocab_hash,
            p: ModelParams::init(rng, dims, scale),
        }
    }

    pub fn zeros(dims: ModelDims) -> PhiModel {
        PhiModel {
            dims,
            vocab_hash: [0; 32],
            p: ModelParams::zeros(dims),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Phrase,
    Sentence,
}

/// Affine image embedding for one level.
pub fn embed_image(model: &PhiModel, feature: &Vector, level: Level) -> Vector {
    assert_eq!(
        feature.len(),
        model.dims.d,
        "embed_image: feature dim {} != D {}",
        feature.len(),
        model.dims.d
    );
    let (w, b) = match level {
        Level::Phrase => (&model.p.w_ip, &model.p.b_ip),
        Level::Sentence => (&model.p.w_is, &model.p.b_is),
    };
    let mut v = matvec(w, feature);
    v.add_assign(b);
    v
}

/// Column of the shared word embedding. Panics on an out-of-range id.
pub fn embed_word(model: &PhiModel, word_id: usize) -> Vector {
    assert!(
        word_id < model.dims.v,
        "embed_word: id {} out of range {}",
        word_id,
        model.dims.v
    );
    model.p.w_e.column(word_id)
}

/// One sentence unit as word ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UnitIds {
    Word(usize),
    Phrase(Vec<usize>),
}

impl UnitIds {
    pub fn is_phrase(&self) -> bool {
        matches!(self, UnitIds::Phrase(_))
    }
}

/// One encodable image/caption pair.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub units: Vec<UnitIds>,
    pub feature: Vector,
}

impl BatchItem {
    /// Map a chunked sentence onto id units with the given vocabulary
    /// (unknown words fall back to the UNK id).
    pub fn from_chunked(
        chunked: &crate::chunker::ChunkedSentence,
        vocab: &crate::corpus::Vocab,
        feature: Vector,
    ) -> BatchItem {
        let units = chunked
            .units
            .iter()
            .map(|u| match u {
                crate::chunker::Unit::Word(w) => UnitIds::Word(vocab.id_or_unk(w)),
                crate::chunker::Unit::Phrase { words, .. } => {
                    UnitIds::Phrase(words.iter().map(|w| vocab.id_or_unk(w)).collect())
                }
            })
            .collect();
        BatchItem { units, feature }
    }
}

/// Where a distractor phrase vector comes from.
#[derive(Clone, Debug)]
pub enum DistractorRef {
    /// z of another sentence's phrase in the same batch; gradients flow back
    /// into that phrase's encoder.
    InBatch { sentence: usize, phrase: usize },
    /// A constant vector; no gradient beyond the shared LSTM step.
    Fixed(Vector),
}

/// Per-sentence, per-phrase-position distractor assignment.
pub type DistractorPlan = Vec<Vec<Vec<DistractorRef>>>;

/// Dropout configuration for a training-mode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainMode {
    pub dropout_rate: f64,
    pub seed: u64,
}

/// Phrase-level encoding: cached steps, per-target log2 probabilities and
/// the compositional vector z.
#[derive(Clone, Debug)]
pub struct PhraseEncoding {
    pub word_ids: Vec<usize>,
    pub caches: Vec<StepCache>,
    pub masks: Option<Vec<Vector>>,
    pub targets: Vec<usize>,
    pub log2p: Vec<f64>,
    pub probs: Vec<Vector>,
    pub z: Vector,
}

impl PhraseEncoding {
    /// Number of loss-bearing steps (word predictions plus the end token).
    pub fn steps(&self) -> usize {
        self.targets.len()
    }
}

/// A classifier side branch at one phrase step.
#[derive(Clone, Debug)]
pub struct SelectionBranch {
    pub source: DistractorRef,
    pub mask: Option<Vector>,
    pub cache: StepCache,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct PhraseStep {
    /// Index into the sentence caches of the step that consumed the phrase.
    pub step: usize,
    /// Index into this sentence's phrase list.
    pub phrase_idx: usize,
    pub true_score: f64,
    pub branches: Vec<SelectionBranch>,
}

#[derive(Clone, Debug)]
pub struct SentenceEncoding {
    pub units: Vec<UnitIds>,
    pub caches: Vec<StepCache>,
    pub masks: Option<Vec<Vector>>,
    pub targets: Vec<usize>,
    pub log2p: Vec<f64>,
    pub probs: Vec<Vector>,
    pub phrase_steps: Vec<PhraseStep>,
}

impl SentenceEncoding {
    /// Composite-sequence step count (units plus the end prediction).
    pub fn q(&self) -> usize {
        self.targets.len()
    }
}

/// Complete forward state of one sentence: all phrase encodings plus the
/// sentence-level encoding, with the loss pieces already accumulated.
#[derive(Clone, Debug)]
pub struct SentenceForward {
    pub feature: Vector,
    pub phrases: Vec<PhraseEncoding>,
    pub sentence: SentenceEncoding,
    /// Normalizer N: sentence steps plus all phrase steps.
    pub n: usize,
    /// Summed negative log2 probability over both levels.
    pub nll: f64,
    /// Phrase-selection cost, kappa-normalized.
    pub selection: f64,
}

impl SentenceForward {
    /// Per-target log2 perplexity of this sentence.
    pub fn log2_ppl(&self) -> f64 {
        assert!(self.n > 0, "perplexity of empty encoding");
        self.nll / self.n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub log2_ppl: f64,
    pub phrase_selection: f64,
    pub regularization: f64,
    pub total: f64,
}

fn scored_log2p(w_d: &Mat, b_d: &Vector, h: &Vector, target: usize) -> (f64, Vector) {
    let mut logits = matvec(w_d, h);
    logits.add_assign(b_d);
    let logp = log_softmax(&logits);
    let probs = logp.map(f64::exp);
    (logp.0[target] / LN_2, probs)
}

fn maybe_mask(rng: Option<&mut (Rng, f64)>, v: &Vector) -> (Vector, Option<Vector>) {
    match rng {
        Some((rng, rate)) if *rate > 0.0 => {
            let mask = dropout_mask(v.len(), *rate, rng);
            let mut masked = v.clone();
            masked.hadamard_assign(&mask);
            (masked, Some(mask))
        }
        _ => (v.clone(), None),
    }
}

/// Encode one phrase from the image feature and its word ids.
///
/// Input schedule: image vector, start token, then one embedded word per
/// step. Scoring starts at the first word prediction and ends at the end
/// token, so a phrase of L words carries L+1 loss-bearing steps.
pub fn encode_phrase(
    model: &PhiModel,
    feature: &Vector,
    word_ids: &[usize],
    mut dropout: Option<&mut (Rng, f64)>,
) -> PhraseEncoding {
    assert!(!word_ids.is_empty(), "encode_phrase: empty phrase");
    let len = word_ids.len();

    let mut inputs = Vec::with_capacity(len + 2);
    inputs.push(embed_image(model, feature, Level::Phrase));
    inputs.push(model.p.x_sp.clone());
    for &id in word_ids {
        inputs.push(embed_word(model, id));
    }

    let mut masks = dropout.is_some().then(Vec::new);
    let mut state = LstmState::zeros(model.dims.k);
    let mut caches = Vec::with_capacity(inputs.len());
    for x in &inputs {
        let (masked, mask) = maybe_mask(dropout.as_deref_mut(), x);
        if let (Some(ms), Some(m)) = (&mut masks, mask) {
            ms.push(m);
        }
        let (next, cache) = lstm_step(&model.p.lstm_p, &masked, &state);
        caches.push(cache);
        state = next;
    }

    let mut targets = Vec::with_capacity(len + 1);
    let mut log2p = Vec::with_capacity(len + 1);
    let mut probs = Vec::with_capacity(len + 1);
    for t in 1..=len + 1 {
        let target = if t <= len { word_ids[t - 1] } else { ID_END_PHRASE };
        let (lp, pr) = scored_log2p(&model.p.w_dp, &model.p.b_dp, &caches[t].h, target);
        targets.push(target);
        log2p.push(lp);
        probs.push(pr);
    }

    let z = caches.last().unwrap().h.clone();
    PhraseEncoding {
        word_ids: word_ids.to_vec(),
        caches,
        masks,
        targets,
        log2p,
        probs,
        z,
    }
}

/// Encode the sentence level over words and phrase vectors.
///
/// `phrase_zs` must align one-to-one with the phrase units in `units`.
/// `distractors` (when selection is wanted) gives, per phrase position, the
/// resolved distractor vectors with their provenance.
#[allow(clippy::too_many_arguments)]
pub fn encode_sentence(
    model: &PhiModel,
    feature: &Vector,
    units: &[UnitIds],
    phrase_zs: &[Vector],
    distractors: Option<&[Vec<(DistractorRef, Vector)>]>,
    mut dropout: Option<&mut (Rng, f64)>,
) -> SentenceEncoding {
    assert!(!units.is_empty(), "encode_sentence: empty unit sequence");
    let n_phrases = units.iter().filter(|u| u.is_phrase()).count();
    assert_eq!(
        phrase_zs.len(),
        n_phrases,
        "encode_sentence: {} phrase vectors for {} phrase units",
        phrase_zs.len(),
        n_phrases
    );
    if let Some(d) = distractors {
        assert_eq!(d.len(), n_phrases, "encode_sentence: misaligned distractors");
    }

    let u = units.len();
    let mut inputs = Vec::with_capacity(u + 2);
    inputs.push(embed_image(model, feature, Level::Sentence));
    inputs.push(model.p.x_ss.clone());
    let mut phrase_pos = Vec::new();
    {
        let mut zi = 0;
        for (j, unit) in units.iter().enumerate() {
            match unit {
                UnitIds::Word(id) => inputs.push(embed_word(model, *id)),
                UnitIds::Phrase(ids) => {
                    assert!(!ids.is_empty(), "encode_sentence: empty phrase unit");
                    inputs.push(phrase_zs[zi].clone());
                    phrase_pos.push((j + 2, zi));
                    zi += 1;
                }
            }
        }
    }

    let mut masks = dropout.is_some().then(Vec::new);
    let mut state = LstmState::zeros(model.dims.k);
    let mut caches: Vec<StepCache> = Vec::with_capacity(inputs.len());
    let mut phrase_steps = Vec::new();
    for (t, x) in inputs.iter().enumerate() {
        let (masked, mask) = maybe_mask(dropout.as_deref_mut(), x);
        if let (Some(ms), Some(m)) = (&mut masks, mask) {
            ms.push(m);
        }
        let prev = state.clone();
        let (next, cache) = lstm_step(&model.p.lstm_s, &masked, &state);
        caches.push(cache);
        state = next;

        // classifier branches at phrase steps
        if let Some((_, zi)) = phrase_pos.iter().find(|&&(step, _)| step == t).copied() {
            let true_score = caches[t].h.dot(&model.p.w_ps);
            let mut branches = Vec::new();
            if let Some(d) = distractors {
                assert!(
                    !d[zi].is_empty(),
                    "encode_sentence: no distractors at phrase step {}",
                    t
                );
                for (source, z) in &d[zi] {
                    let (masked_z, mask) = maybe_mask(dropout.as_deref_mut(), z);
                    let (_, cache) = lstm_step(&model.p.lstm_s, &masked_z, &prev);
                    let score = cache.h.dot(&model.p.w_ps);
                    branches.push(SelectionBranch {
                        source: source.clone(),
                        mask,
                        cache,
                        score,
                    });
                }
            }
            phrase_steps.push(PhraseStep {
                step: t,
                phrase_idx: zi,
                true_score,
                branches,
            });
        }
    }

    let mut targets = Vec::with_capacity(u + 1);
    let mut log2p = Vec::with_capacity(u + 1);
    let mut probs = Vec::with_capacity(u + 1);
    for t in 1..=u + 1 {
        let target = if t <= u {
            match &units[t - 1] {
                UnitIds::Word(id) => *id,
                UnitIds::Phrase(_) => ID_PHRASE_TOKEN,
            }
        } else {
            ID_END_SENT
        };
        let (lp, pr) = scored_log2p(&model.p.w_ds, &model.p.b_ds, &caches[t].h, target);
        targets.push(target);
        log2p.push(lp);
        probs.push(pr);
    }

    SentenceEncoding {
        units: units.to_vec(),
        caches,
        masks,
        targets,
        log2p,
        probs,
        phrase_steps,
    }
}

/// Log2 perplexity of one sentence given its phrase encodings (the encoding
/// caches both levels' target log-probabilities).
pub fn sentence_perplexity(sentence: &SentenceEncoding, phrases: &[PhraseEncoding]) -> f64 {
    let n = sentence.q() + phrases.iter().map(|p| p.steps()).sum::<usize>();
    assert!(n > 0, "sentence_perplexity: N == 0");
    let sum: f64 = sentence.log2p.iter().sum::<f64>()
        + phrases.iter().flat_map(|p| p.log2p.iter()).sum::<f64>();
    -sum / n as f64
}

/// Kappa-normalized selection cost over the already-computed classifier
/// scores: 1/2 on the true candidate, 1/(2H) on each distractor.
pub fn phrase_selection_loss(sentence: &SentenceEncoding) -> f64 {
    let mut cost = 0.0;
    for ps in &sentence.phrase_steps {
        assert!(
            !ps.branches.is_empty(),
            "phrase_selection_loss: H == 0 at step {}",
            ps.step
        );
        let h = ps.branches.len() as f64;
        cost += 0.5 * sigmoid(1.0 - ps.true_score);
        for b in &ps.branches {
            cost += (0.5 / h) * sigmoid(1.0 + b.score);
        }
    }
    cost
}

/// Forward pass of one sentence: phrase encodings, sentence encoding and
/// loss pieces. `distractors` supplies resolved vectors per phrase position.
fn forward_sentence(
    model: &PhiModel,
    item: &BatchItem,
    distractors: Option<&[Vec<(DistractorRef, Vector)>]>,
    mode: Option<TrainMode>,
    sentence_index: u64,
) -> SentenceForward {
    let mode = mode.filter(|m| m.dropout_rate > 0.0);
    let (mut rng_p, mut rng_s) = match mode {
        Some(m) => {
            let base = Rng::new(m.seed);
            (
                Some((base.derive(2 * sentence_index), m.dropout_rate)),
                Some((base.derive(2 * sentence_index + 1), m.dropout_rate)),
            )
        }
        None => (None, None),
    };

    let mut phrases = Vec::new();
    for unit in &item.units {
        if let UnitIds::Phrase(ids) = unit {
            phrases.push(encode_phrase(model, &item.feature, ids, rng_p.as_mut()));
        }
    }
    let zs: Vec<Vector> = phrases.iter().map(|p| p.z.clone()).collect();
    let sentence = encode_sentence(
        model,
        &item.feature,
        &item.units,
        &zs,
        distractors,
        rng_s.as_mut(),
    );

    let n = sentence.q() + phrases.iter().map(|p| p.steps()).sum::<usize>();
    let nll = -(sentence.log2p.iter().sum::<f64>()
        + phrases.iter().flat_map(|p| p.log2p.iter()).sum::<f64>());
    let selection = if distractors.is_some() {
        phrase_selection_loss(&sentence)
    } else {
        0.0
    };

    SentenceForward {
        feature: item.feature.clone(),
        phrases,
        sentence,
        n,
        nll,
        selection,
    }
}

/// Batch forward state.
pub struct BatchForward {
    pub sentences: Vec<SentenceForward>,
    /// Eq-style normalizer: batch size times summed N.
    pub norm: f64,
}

/// Run the full forward pass over a batch. The distractor plan, when given,
/// is resolved against the freshly computed phrase vectors (in-batch refs
/// must point at another sentence).
pub fn forward_batch(
    model: &PhiModel,
    items: &[BatchItem],
    plan: Option<&DistractorPlan>,
    mode: Option<TrainMode>,
) -> BatchForward {
    assert!(!items.is_empty(), "forward_batch: empty batch");
    let mode = mode.filter(|m| m.dropout_rate > 0.0);

    // Pre-pass: phrase vectors for resolving in-batch distractor references.
    // Only needed when a plan is present; per-sentence dropout streams make
    // this pass identical to the one inside forward_sentence.
    let resolved: Vec<Option<Vec<Vec<(DistractorRef, Vector)>>>> = match plan {
        None => vec![None; items.len()],
        Some(plan) => {
            assert_eq!(plan.len(), items.len(), "forward_batch: plan length mismatch");
            let all_zs: Vec<Vec<Vector>> = items
                .iter()
                .enumerate()
                .map(|(j, item)| {
                    let mut rng = mode.map(|m| (Rng::new(m.seed).derive(2 * j as u64), m.dropout_rate));
                    item.units
                        .iter()
                        .filter_map(|u| match u {
                            UnitIds::Phrase(ids) => Some(
                                encode_phrase(model, &item.feature, ids, rng.as_mut()).z,
                            ),
                            UnitIds::Word(_) => None,
                        })
                        .collect()
                })
                .collect();
            plan.iter()
                .enumerate()
                .map(|(j, positions)| {
                    Some(
                        positions
                            .iter()
                            .map(|refs| {
                                refs.iter()
                                    .map(|r| {
                                        let z = match r {
                                            DistractorRef::InBatch { sentence, phrase } => {
                                                assert_ne!(
                                                    *sentence, j,
                                                    "distractor must come from another sentence"
                                                );
                                                all_zs[*sentence][*phrase].clone()
                                            }
                                            DistractorRef::Fixed(v) => v.clone(),
                                        };
                                        (r.clone(), z)
                                    })
                                    .collect()
                            })
                            .collect(),
                    )
                })
                .collect()
        }
    };

    let sentences: Vec<SentenceForward> = items
        .iter()
        .enumerate()
        .map(|(j, item)| {
            forward_sentence(model, item, resolved[j].as_deref(), mode, j as u64)
        })
        .collect();

    let total_n: usize = sentences.iter().map(|s| s.n).sum();
    let norm = items.len() as f64 * total_n as f64;
    BatchForward { sentences, norm }
}

/// Total cost of a batch: per-target negative log2 likelihood plus the
/// selection cost, both divided by (batch size x summed N), plus the squared
/// parameter norm weighted by `lambda`.
pub fn total_cost(model: &PhiModel, batch: &BatchForward, lambda: f64) -> LossBreakdown {
    assert!(!batch.sentences.is_empty(), "total_cost: empty batch");
    let nll: f64 = batch.sentences.iter().map(|s| s.nll).sum();
    let sel: f64 = batch.sentences.iter().map(|s| s.selection).sum();
    let reg = if lambda != 0.0 {
        lambda * model.p.squared_norm()
    } else {
        0.0
    };
    let log2_ppl = nll / batch.norm;
    let phrase_selection = sel / batch.norm;
    LossBreakdown {
        log2_ppl,
        phrase_selection,
        regularization: reg,
        total: log2_ppl + phrase_selection + reg,
    }
}

fn unmask(dx: &Vector, mask: Option<&Vector>) -> Vector {
    match mask {
        Some(m) => {
            let mut out = dx.clone();
            out.hadamard_assign(m);
            out
        }
        None => dx.clone(),
    }
}

/// Which selection loss the backward pass differentiates.
///
/// `MarginSigmoid` is the model's own objective, kappa-weighted
/// sigma(1 - y*s). Its gradient vanishes on both sides of the margin, which
/// makes the saturated reject-everything/accept-everything plateaus
/// absorbing when phrase representations are not yet separable; the convex
/// `Logistic` surrogate (kappa-weighted softplus(-y*s)) keeps a full-strength
/// gradient in the violated region and is used as a bootstrap phase by the
/// trainer before switching to the exact objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionObjective {
    MarginSigmoid,
    Logistic,
}

impl SelectionObjective {
    /// d(term)/d(score) for a candidate with label `y` (+1 true, -1
    /// distractor), excluding the kappa weight.
    fn dscore(self, y: f64, s: f64) -> f64 {
        match self {
            SelectionObjective::MarginSigmoid => {
                let m = sigmoid(1.0 - y * s);
                -y * m * (1.0 - m)
            }
            SelectionObjective::Logistic => -y * sigmoid(-y * s),
        }
    }
}

/// Exact gradients of `total_cost` for every parameter.
///
/// Sentence-level gradients on phrase-vector inputs (both from the backbone
/// and from selection branches referencing in-batch phrases) are collected
/// first, then propagated through the corresponding phrase-level backward
/// passes.
pub fn backward_batch(model: &PhiModel, batch: &BatchForward, lambda: f64) -> ModelParams {
    backward_batch_with(model, batch, lambda, SelectionObjective::MarginSigmoid)
}

/// `backward_batch` with an explicit selection-loss choice; everything else
/// is identical.
pub fn backward_batch_with(
    model: &PhiModel,
    batch: &BatchForward,
    lambda: f64,
    objective: SelectionObjective,
) -> ModelParams {
    let k = model.dims.k;
    let scale = 1.0 / batch.norm;
    let mut grads = ModelParams::zeros(model.dims);

    // upstream gradient on each phrase's z: [sentence][phrase]
    let mut dz: Vec<Vec<Vector>> = batch
        .sentences
        .iter()
        .map(|s| vec![Vector::zeros(k); s.phrases.len()])
        .collect();

    // --- sentence-level backward ---
    for (j, sf) in batch.sentences.iter().enumerate() {
        let enc = &sf.sentence;
        let steps = enc.caches.len();
        let mut dh_steps = vec![Vector::zeros(k); steps];

        // softmax gradients at scored steps (cache index t = 1..=U+1)
        for (idx, target) in enc.targets.iter().enumerate() {
            let t = idx + 1;
            let mut dlogits = enc.probs[idx].clone();
            dlogits.0[*target] -= 1.0;
            dlogits.scale(scale / LN_2);
            grads.w_ds.add_outer_scaled(&dlogits, &enc.caches[t].h, 1.0);
            grads.b_ds.add_assign(&dlogits);
            dh_steps[t].add_assign(&matvec_t(&model.p.w_ds, &dlogits));
        }

        // classifier gradients; side branches also push gradient into the
        // predecessor state and their input vectors
        let mut branch_dprev: Vec<LstmState> = vec![LstmState::zeros(k); steps];
        for ps in &enc.phrase_steps {
            if ps.branches.is_empty() {
                continue;
            }
            let h_count = ps.branches.len() as f64;
            let ds_true = scale * 0.5 * objective.dscore(1.0, ps.true_score);
            grads.w_ps.add_assign_scaled(&enc.caches[ps.step].h, ds_true);
            dh_steps[ps.step].add_assign_scaled(&model.p.w_ps, ds_true);

            let prev = if ps.step == 0 {
                LstmState::zeros(k)
            } else {
                enc.caches[ps.step - 1].state()
            };
            for b in &ps.branches {
                let ds = scale * (0.5 / h_count) * objective.dscore(-1.0, b.score);
                grads.w_ps.add_assign_scaled(&b.cache.h, ds);
                let mut dh_b = model.p.w_ps.clone();
                dh_b.scale(ds);
                let (dx_b, dprev_b) = step_backward(
                    &model.p.lstm_s,
                    &b.cache,
                    &prev,
                    &dh_b,
                    &Vector::zeros(k),
                    &mut grads.lstm_s,
                );
                branch_dprev[ps.step].h.add_assign(&dprev_b.h);
                branch_dprev[ps.step].c.add_assign(&dprev_b.c);
                if let DistractorRef::InBatch { sentence, phrase } = &b.source {
                    dz[*sentence][*phrase].add_assign(&unmask(&dx_b, b.mask.as_ref()));
                }
            }
        }

        // walk the backbone
        let mut dh = Vector::zeros(k);
        let mut dc = Vector::zeros(k);
        for t in (0..steps).rev() {
            dh.add_assign(&dh_steps[t]);
            let prev = if t == 0 {
                LstmState::zeros(k)
            } else {
                enc.caches[t - 1].state()
            };
            let (dx, dprev) = step_backward(
                &model.p.lstm_s,
                &enc.caches[t],
                &prev,
                &dh,
                &dc,
                &mut grads.lstm_s,
            );
            let dx = unmask(&dx, enc.masks.as_ref().map(|m| &m[t]));
            if t == 0 {
                grads.w_is.add_outer_scaled(&dx, &sf.feature, 1.0);
                grads.b_is.add_assign(&dx);
            } else if t == 1 {
                grads.x_ss.add_assign(&dx);
            } else {
                match &enc.units[t - 2] {
                    UnitIds::Word(id) => grads.w_e.add_column_scaled(*id, &dx, 1.0),
                    UnitIds::Phrase(_) => {
                        let zi = enc
                            .phrase_steps
                            .iter()
                            .find(|ps| ps.step == t)
                            .map(|ps| ps.phrase_idx)
                            .expect("phrase step bookkeeping");
                        dz[j][zi].add_assign(&dx);
                    }
                }
            }
            dh = dprev.h;
            dc = dprev.c;
            dh.add_assign(&branch_dprev[t].h);
            dc.add_assign(&branch_dprev[t].c);
        }
    }

    // --- phrase-level backward ---
    for (j, sf) in batch.sentences.iter().enumerate() {
        for (pi, enc) in sf.phrases.iter().enumerate() {
            let steps = enc.caches.len();
            let mut dh_steps = vec![Vector::zeros(k); steps];
            for (idx, target) in enc.targets.iter().enumerate() {
                let t = idx + 1;
                let mut dlogits = enc.probs[idx].clone();
                dlogits.0[*target] -= 1.0;
                dlogits.scale(scale / LN_2);
                grads.w_dp.add_outer_scaled(&dlogits, &enc.caches[t].h, 1.0);
                grads.b_dp.add_assign(&dlogits);
                dh_steps[t].add_assign(&matvec_t(&model.p.w_dp, &dlogits));
            }
            // z upstream lands on the final hidden state
            dh_steps[steps - 1].add_assign(&dz[j][pi]);

            let mut dh = Vector::zeros(k);
            let mut dc = Vector::zeros(k);
            for t in (0..steps).rev() {
                dh.add_assign(&dh_steps[t]);
                let prev = if t == 0 {
                    LstmState::zeros(k)
                } else {
                    enc.caches[t - 1].state()
                };
                let (dx, dprev) = step_backward(
                    &model.p.lstm_p,
                    &enc.caches[t],
                    &prev,
                    &dh,
                    &dc,
                    &mut grads.lstm_p,
                );
                let dx = unmask(&dx, enc.masks.as_ref().map(|m| &m[t]));
                if t == 0 {
                    grads.w_ip.add_outer_scaled(&dx, &sf.feature, 1.0);
                    grads.b_ip.add_assign(&dx);
                } else if t == 1 {
                    grads.x_sp.add_assign(&dx);
                } else {
                    grads.w_e.add_column_scaled(enc.word_ids[t - 2], &dx, 1.0);
                }
                dh = dprev.h;
                dc = dprev.c;
            }
        }
    }

    if lambda != 0.0 {
        grads.add_scaled(&model.p, 2.0 * lambda);
    }
    grads
}

// --- checkpoint serialization ---

const CKPT_MAGIC: &[u8; 4] = b"PHIM";
const CKPT_VERSION: u32 = 1;

/// Write the checkpoint: magic "PHIM", u32 version, u32 K, u32 D, u32 V,
/// the 32-byte vocabulary hash, then every parameter as little-endian f64
/// in the canonical field order.
pub fn save_checkpoint(model: &PhiModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.dims.k as u32).to_le_bytes());
    buf.extend_from_slice(&(model.dims.d as u32).to_le_bytes());
    buf.extend_from_slice(&(model.dims.v as u32).to_le_bytes());
    buf.extend_from_slice(&model.vocab_hash);
    for s in model.p.field_slices() {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PhiModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let need = |n: usize, at: usize| -> Result<()> {
        if at + n > bytes.len() {
            Err(Error::Format("truncated checkpoint".into()))
        } else {
            Ok(())
        }
    };
    need(4 + 4 + 12 + 32, 0)?;
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if u32_at(4) != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", u32_at(4))));
    }
    let dims = ModelDims {
        k: u32_at(8) as usize,
        d: u32_at(12) as usize,
        v: u32_at(16) as usize,
    };
    let mut vocab_hash = [0u8; 32];
    vocab_hash.copy_from_slice(&bytes[20..52]);

    let mut p = ModelParams::zeros(dims);
    let mut at = 52;
    for s in p.field_slices_mut() {
        need(8 * s.len(), at)?;
        for v in s.iter_mut() {
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            at += 8;
        }
    }
    if at != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(PhiModel { dims, vocab_hash, p })
}
