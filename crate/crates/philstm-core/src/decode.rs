//! Two-stage caption generation: phrase-level beam search produces candidate
//! noun phrases, then sentence-level beam search assembles words and phrases,
//! expanding the reserved phrase token over classifier-approved candidates.
//!
//! Constraints enforced throughout: a candidate phrase appears at most once
//! per hypothesis, sentences are capped at `max_units`, phrases at
//! `max_phrase_words` words, and candidates above the perplexity threshold
//! are discarded.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ID_END_PHRASE, ID_END_SENT, ID_PHRASE_TOKEN, SPECIALS};
use crate::linalg::{log_softmax, matvec, Mat, Vector};
use crate::lstm::{lstm_step, LstmState};
use crate::model::{embed_image, embed_word, Level, PhiModel};

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Number of candidate phrases kept.
    pub k_phrases: usize,
    /// Log2-perplexity threshold above which candidates are discarded.
    pub threshold_t: f64,
    pub phrase_beam: usize,
    pub sent_beam: usize,
    /// Maximum units (words or phrases) in a sentence.
    pub max_units: usize,
    /// Maximum words in a generated phrase.
    pub max_phrase_words: usize,
}

impl DecodeConfig {
    /// Profile tuned for small corpora: T = 6.5, K = 6.
    pub fn small_data() -> DecodeConfig {
        DecodeConfig {
            k_phrases: 6,
            threshold_t: 6.5,
            phrase_beam: 10,
            sent_beam: 5,
            max_units: 20,
            max_phrase_words: 10,
        }
    }

    /// Profile for larger corpora: T = 5.2, K = 5.
    pub fn large_data() -> DecodeConfig {
        DecodeConfig {
            k_phrases: 5,
            threshold_t: 5.2,
            ..DecodeConfig::small_data()
        }
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig::small_data()
    }
}

/// A generated phrase: word ids, compositional vector (hidden state at the
/// last word) and its per-token log2 perplexity.
#[derive(Clone, Debug)]
pub struct CandidatePhrase {
    pub word_ids: Vec<usize>,
    pub z: Vector,
    pub log2_ppl: f64,
    /// Summed log2 probability of the word and end-token predictions.
    pub cum_log2p: f64,
    /// Number of scored predictions (words plus the end token).
    pub steps: usize,
}

fn log2_dist(w_d: &Mat, b_d: &Vector, h: &Vector) -> Vector {
    let mut logits = matvec(w_d, h);
    logits.add_assign(b_d);
    let mut lp = log_softmax(&logits);
    lp.scale(1.0 / LN_2);
    lp
}

/// Perplexities of different-length hypotheses pick up last-ulp noise from
/// the per-length division, so ties are detected with a small tolerance
/// before the lexicographic tie-break applies.
const TIE_EPS: f64 = 1e-9;

fn cmp_ppl(a: f64, b: f64) -> std::cmp::Ordering {
    if (a - b).abs() <= TIE_EPS {
        std::cmp::Ordering::Equal
    } else {
        a.partial_cmp(&b).unwrap()
    }
}

/// Word ids a generated phrase or sentence may emit: the unknown token plus
/// every non-reserved word.
fn emittable_words(v: usize) -> impl Iterator<Item = usize> {
    std::iter::once(crate::corpus::ID_UNK).chain(SPECIALS.len()..v)
}

#[derive(Clone)]
struct PhraseHyp {
    state: LstmState,
    tokens: Vec<usize>,
    cum_log2p: f64,
}

/// Beam search over the phrase level. Candidates are ranked by per-token
/// log2 perplexity (word predictions plus the end-token prediction), those
/// above `threshold_t` are discarded, and at most `k_phrases` are returned.
/// Ties break lexicographically on token ids, then shorter first.
pub fn generate_phrases(model: &PhiModel, feature: &Vector, cfg: &DecodeConfig) -> Vec<CandidatePhrase> {
    let v = model.dims.v;
    let zeros = LstmState::zeros(model.dims.k);
    let v_p = embed_image(model, feature, Level::Phrase);
    let (s0, _) = lstm_step(&model.p.lstm_p, &v_p, &zeros);
    let (s1, _) = lstm_step(&model.p.lstm_p, &model.p.x_sp, &s0);

    let mut live = vec![PhraseHyp {
        state: s1,
        tokens: Vec::new(),
        cum_log2p: 0.0,
    }];
    let mut done: Vec<CandidatePhrase> = Vec::new();

    for _ in 0..cfg.max_phrase_words {
        let mut expansions: Vec<PhraseHyp> = Vec::new();
        for hyp in &live {
            let lp = log2_dist(&model.p.w_dp, &model.p.b_dp, &hyp.state.h);
            // completing here predicts the end token after >= 1 word
            if !hyp.tokens.is_empty() {
                let cum = hyp.cum_log2p + lp.0[ID_END_PHRASE];
                let steps = hyp.tokens.len() + 1;
                done.push(CandidatePhrase {
                    word_ids: hyp.tokens.clone(),
                    z: hyp.state.h.clone(),
                    log2_ppl: -cum / steps as f64,
                    cum_log2p: cum,
                    steps,
                });
            }
            for w in emittable_words(v) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(w);
                let (state, _) = lstm_step(&model.p.lstm_p, &embed_word(model, w), &hyp.state);
                expansions.push(PhraseHyp {
                    state,
                    tokens,
                    cum_log2p: hyp.cum_log2p + lp.0[w],
                });
            }
        }
        expansions.sort_by(|a, b| {
            b.cum_log2p
                .partial_cmp(&a.cum_log2p)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        expansions.truncate(cfg.phrase_beam);
        live = expansions;
    }
    // hypotheses at the word cap can only complete
    for hyp in &live {
        let lp = log2_dist(&model.p.w_dp, &model.p.b_dp, &hyp.state.h);
        let cum = hyp.cum_log2p + lp.0[ID_END_PHRASE];
        let steps = hyp.tokens.len() + 1;
        done.push(CandidatePhrase {
            word_ids: hyp.tokens.clone(),
            z: hyp.state.h.clone(),
            log2_ppl: -cum / steps as f64,
            cum_log2p: cum,
            steps,
        });
    }

    done.sort_by(|a, b| {
        cmp_ppl(a.log2_ppl, b.log2_ppl).then_with(|| a.word_ids.cmp(&b.word_ids))
    });
    done.retain(|c| c.log2_ppl <= cfg.threshold_t);
    done.truncate(cfg.k_phrases);
    done
}

/// Classifier score of a candidate phrase vector at a sentence state: one
/// sentence-level step with input z, dotted with the selection direction.
/// Positive means accepted. The state is not mutated, so sibling candidates
/// at the same step are independent.
pub fn classify_phrase(model: &PhiModel, sent_state: &LstmState, z: &Vector) -> f64 {
    let (state, _) = lstm_step(&model.p.lstm_s, z, sent_state);
    state.h.dot(&model.p.w_ps)
}

/// One unit of a decoded caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum DecodedUnit {
    Word(usize),
    /// Index into the candidate list.
    Phrase(usize),
}

#[derive(Clone)]
struct SentHyp {
    state: LstmState,
    units: Vec<DecodedUnit>,
    /// Sort key mirroring `units` (phrases offset past the vocabulary).
    key: Vec<usize>,
    used: Vec<bool>,
    /// Summed log2 probability of every scored prediction, including the
    /// internal word and end-token predictions of used phrases, mirroring
    /// the training perplexity.
    cum_log2p: f64,
    /// Number of scored predictions included in `cum_log2p`.
    steps: usize,
}

impl SentHyp {
    fn norm_log2_ppl(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            -self.cum_log2p / self.steps as f64
        }
    }
}

#[derive(Clone, Debug)]
struct FinishedHyp {
    units: Vec<DecodedUnit>,
    key: Vec<usize>,
    norm_log2_ppl: f64,
}

/// Outcome of one caption decode.
#[derive(Clone, Debug)]
pub struct DecodeOutcome {
    pub units: Vec<DecodedUnit>,
    /// Flattened word ids of the caption.
    pub word_ids: Vec<usize>,
    pub candidates: Vec<CandidatePhrase>,
    /// Classifier score of each candidate at the first unit position.
    pub candidate_scores: Vec<f64>,
    /// Per-scored-step log2 perplexity of the emitted hypothesis.
    pub log2_ppl: f64,
    /// True when every branch died and a partial hypothesis was returned.
    pub degraded: bool,
}

/// Sentence-level beam search with phrase-token expansion over unused,
/// classifier-approved candidates. Hypotheses are ranked by per-step log2
/// perplexity; generation stops at the end token or the unit cap. If every
/// branch dies the best partial hypothesis is returned with `degraded` set.
pub fn generate_caption(model: &PhiModel, feature: &Vector, cfg: &DecodeConfig) -> DecodeOutcome {
    let v = model.dims.v;
    let candidates = generate_phrases(model, feature, cfg);
    let zeros = LstmState::zeros(model.dims.k);
    let v_s = embed_image(model, feature, Level::Sentence);
    let (s0, _) = lstm_step(&model.p.lstm_s, &v_s, &zeros);
    let (s1, _) = lstm_step(&model.p.lstm_s, &model.p.x_ss, &s0);

    let candidate_scores: Vec<f64> = candidates
        .iter()
        .map(|c| classify_phrase(model, &s1, &c.z))
        .collect();

    let mut live = vec![SentHyp {
        state: s1,
        units: Vec::new(),
        key: Vec::new(),
        used: vec![false; candidates.len()],
        cum_log2p: 0.0,
        steps: 0,
    }];
    let mut done: Vec<FinishedHyp> = Vec::new();
    let mut best_partial: Option<(f64, SentHyp)> = None;

    let finish = |hyp: &SentHyp, end_lp: f64, done: &mut Vec<FinishedHyp>| {
        if hyp.units.is_empty() {
            return;
        }
        let cum = hyp.cum_log2p + end_lp;
        let steps = hyp.steps + 1;
        done.push(FinishedHyp {
            units: hyp.units.clone(),
            key: hyp.key.clone(),
            norm_log2_ppl: -cum / steps as f64,
        });
    };

    for _ in 0..cfg.max_units {
        let mut expansions: Vec<SentHyp> = Vec::new();
        for hyp in &live {
            let lp = log2_dist(&model.p.w_ds, &model.p.b_ds, &hyp.state.h);
            finish(hyp, lp.0[ID_END_SENT], &mut done);

            if !hyp.units.is_empty() {
                let norm = hyp.norm_log2_ppl();
                if best_partial.as_ref().map_or(true, |(b, _)| norm < *b) {
                    best_partial = Some((norm, hyp.clone()));
                }
            }

            for w in emittable_words(v) {
                let (state, _) = lstm_step(&model.p.lstm_s, &embed_word(model, w), &hyp.state);
                let mut units = hyp.units.clone();
                units.push(DecodedUnit::Word(w));
                let mut key = hyp.key.clone();
                key.push(w);
                expansions.push(SentHyp {
                    state,
                    units,
                    key,
                    used: hyp.used.clone(),
                    cum_log2p: hyp.cum_log2p + lp.0[w],
                    steps: hyp.steps + 1,
                });
            }

            // phrase-token branch: one expansion per unused accepted
            // candidate; the phrase brings its own scored predictions with
            // it, as in the training perplexity
            for (ci, cand) in candidates.iter().enumerate() {
                if hyp.used[ci] {
                    continue;
                }
                if classify_phrase(model, &hyp.state, &cand.z) <= 0.0 {
                    continue;
                }
                let (state, _) = lstm_step(&model.p.lstm_s, &cand.z, &hyp.state);
                let mut units = hyp.units.clone();
                units.push(DecodedUnit::Phrase(ci));
                let mut key = hyp.key.clone();
                key.push(v + ci);
                let mut used = hyp.used.clone();
                used[ci] = true;
                expansions.push(SentHyp {
                    state,
                    units,
                    key,
                    used,
                    cum_log2p: hyp.cum_log2p + lp.0[ID_PHRASE_TOKEN] + cand.cum_log2p,
                    steps: hyp.steps + 1 + cand.steps,
                });
            }
        }
        // prune by per-step perplexity; hypotheses differ in scored-step
        // counts once phrases enter, so raw sums are not comparable
        expansions.sort_by(|a, b| {
            cmp_ppl(a.norm_log2_ppl(), b.norm_log2_ppl()).then_with(|| a.key.cmp(&b.key))
        });
        expansions.truncate(cfg.sent_beam);
        live = expansions;
        if live.is_empty() {
            break;
        }
    }
    // unit cap reached: remaining hypotheses may only finish
    for hyp in &live {
        let lp = log2_dist(&model.p.w_ds, &model.p.b_ds, &hyp.state.h);
        finish(hyp, lp.0[ID_END_SENT], &mut done);
    }

    done.sort_by(|a, b| {
        cmp_ppl(a.norm_log2_ppl, b.norm_log2_ppl)
            .then_with(|| a.key.cmp(&b.key))
            .then_with(|| a.units.len().cmp(&b.units.len()))
    });

    let (units, log2_ppl, degraded) = match done.first() {
        Some(best) => (best.units.clone(), best.norm_log2_ppl, false),
        None => match best_partial {
            Some((norm, hyp)) => (hyp.units, norm, true),
            None => (Vec::new(), f64::INFINITY, true),
        },
    };

    let word_ids = units
        .iter()
        .flat_map(|u| match u {
            DecodedUnit::Word(id) => vec![*id],
            DecodedUnit::Phrase(ci) => candidates[*ci].word_ids.clone(),
        })
        .collect();

    DecodeOutcome {
        units,
        word_ids,
        candidates,
        candidate_scores,
        log2_ppl,
        degraded,
    }
}

/// Decode many images; read-only model, deterministic output order.
pub fn generate_captions<'a, I>(model: &PhiModel, features: I, cfg: &DecodeConfig) -> Vec<DecodeOutcome>
where
    I: IntoIterator<Item = &'a Vector>,
    I::IntoIter: Send,
{
    let feats: Vec<&Vector> = features.into_iter().collect();
    feats
        .par_iter()
        .map(|f| generate_caption(model, f, cfg))
        .collect()
}
