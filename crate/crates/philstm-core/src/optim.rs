//! RMSprop training loop with input dropout, weight decay, minibatching and
//! validation-based model selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::eval_perplexity;
use crate::linalg::{Rng, Vector};
use crate::model::{
    backward_batch_with, forward_batch, total_cost, BatchItem, DistractorPlan, DistractorRef,
    ModelParams, PhiModel, SelectionObjective, TrainMode,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_rms_decay")]
    pub rms_decay: f64,
    #[serde(default = "default_rms_epsilon")]
    pub rms_epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Number of distractor phrases per phrase step.
    #[serde(rename = "H", default = "default_h")]
    pub h_distractors: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Epochs trained on the perplexity objective alone before the
    /// phrase-selection term activates. While phrase vectors are still
    /// indistinguishable the selection cost descends into a saturated
    /// reject-everything equilibrium it cannot leave; on small corpora a
    /// short warmup lets the phrase vectors separate first.
    #[serde(default)]
    pub selection_warmup_epochs: usize,
    /// Epochs, after the warmup, whose selection gradient uses the convex
    /// logistic surrogate instead of the margin sigmoid. The surrogate keeps
    /// full gradient strength on misclassified candidates, pulling the
    /// classifier and the shared LSTM out of the saturated plateaus; the
    /// exact objective takes over afterwards and preserves the separation.
    #[serde(default)]
    pub selection_bootstrap_epochs: usize,
}

fn default_learning_rate() -> f64 {
    0.01
}
fn default_rms_decay() -> f64 {
    0.9
}
fn default_rms_epsilon() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    100
}
fn default_h() -> usize {
    2
}
fn default_max_epochs() -> usize {
    50
}
fn default_grad_clip() -> f64 {
    5.0
}
fn default_seed() -> u64 {
    42
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.h_distractors == 0 {
            return Err(Error::Validation("H must be >= 1".into()));
        }
        Ok(())
    }
}

/// Running mean-square accumulators, one per parameter.
pub struct RmsState(pub ModelParams);

impl RmsState {
    pub fn new(model: &PhiModel) -> RmsState {
        RmsState(ModelParams::zeros(model.dims))
    }
}

/// One RMSprop step: s <- rho*s + (1-rho)*g^2, theta <- theta - lr*g/sqrt(s+eps).
/// Fails on non-finite gradients.
pub fn rmsprop_update(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut RmsState,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Validation("non-finite gradient after clipping".into()));
    }
    let rho = cfg.rms_decay;
    let lr = cfg.learning_rate;
    let eps = cfg.rms_epsilon;
    for ((p, g), s) in params
        .field_slices_mut()
        .into_iter()
        .zip(grads.field_slices())
        .zip(state.0.field_slices_mut())
    {
        for ((pv, &gv), sv) in p.iter_mut().zip(g).zip(s.iter_mut()) {
            *sv = rho * *sv + (1.0 - rho) * gv * gv;
            *pv -= lr * gv / (*sv + eps).sqrt();
        }
    }
    Ok(())
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// 1/(1-rate), so the masked vector is unbiased in expectation.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vector {
    assert!((0.0..1.0).contains(&rate), "dropout rate {} outside [0, 1)", rate);
    let keep = 1.0 / (1.0 - rate);
    Vector(
        (0..len)
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect(),
    )
}

/// Inverted dropout over one input vector. Identity when `rate == 0`.
pub fn apply_dropout(v: &Vector, rate: f64, rng: &mut Rng) -> Vector {
    if rate == 0.0 {
        return v.clone();
    }
    let mask = dropout_mask(v.len(), rate, rng);
    let mut out = v.clone();
    out.hadamard_assign(&mask);
    out
}

/// Scale gradients so their global L2 norm does not exceed `threshold`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ModelParams, threshold: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm.is_finite() && norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

/// Distractor assignment for one batch: per sentence and phrase position,
/// `h` phrases drawn uniformly from other sentences of the batch. When a
/// batch has no foreign phrases to offer, fixed random vectors stand in.
pub fn build_distractor_plan(
    items: &[BatchItem],
    h: usize,
    k: usize,
    rng: &mut Rng,
) -> DistractorPlan {
    let pool: Vec<(usize, usize)> = items
        .iter()
        .enumerate()
        .flat_map(|(s, item)| {
            let phrases = item.units.iter().filter(|u| u.is_phrase()).count();
            (0..phrases).map(move |p| (s, p))
        })
        .collect();

    items
        .iter()
        .enumerate()
        .map(|(j, item)| {
            let foreign: Vec<(usize, usize)> =
                pool.iter().copied().filter(|&(s, _)| s != j).collect();
            let positions = item.units.iter().filter(|u| u.is_phrase()).count();
            (0..positions)
                .map(|_| {
                    (0..h)
                        .map(|_| {
                            if foreign.is_empty() {
                                let v = Vector(
                                    (0..k).map(|_| rng.uniform(-0.5, 0.5)).collect(),
                                );
                                DistractorRef::Fixed(v)
                            } else {
                                let (s, p) = foreign[rng.next_below(foreign.len())];
                                DistractorRef::InBatch {
                                    sentence: s,
                                    phrase: p,
                                }
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_log2ppl: f64,
    pub val_log2ppl: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation perplexity.
    pub model: PhiModel,
    pub report: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Minibatch RMSprop over the full objective. Keeps the parameters from the
/// best-validation epoch. Aborts with a diagnostic if the loss goes
/// non-finite.
pub fn train(
    mut model: PhiModel,
    train_set: &[BatchItem],
    val_set: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Validation("empty validation set".into()));
    }

    let master = Rng::new(cfg.seed);
    let mut rms = RmsState::new(&model);
    let mut report = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let mut epoch_rng = master.derive(epoch as u64);
        epoch_rng.shuffle(&mut order);

        let with_selection = epoch >= cfg.selection_warmup_epochs;
        let objective = if epoch < cfg.selection_warmup_epochs + cfg.selection_bootstrap_epochs {
            SelectionObjective::Logistic
        } else {
            SelectionObjective::MarginSigmoid
        };
        let mut ppl_sum = 0.0;
        let mut ppl_count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<BatchItem> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let mut batch_rng = epoch_rng.derive(batch_idx as u64);
            let plan = with_selection.then(|| {
                build_distractor_plan(&items, cfg.h_distractors, model.dims.k, &mut batch_rng)
            });
            let mode = TrainMode {
                dropout_rate: cfg.dropout_rate,
                seed: batch_rng.next_u64(),
            };
            let fwd = forward_batch(&model, &items, plan.as_ref(), Some(mode));
            let cost = total_cost(&model, &fwd, cfg.weight_decay);
            if !cost.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("total cost {:?}", cost),
                });
            }
            for sf in &fwd.sentences {
                ppl_sum += sf.log2_ppl();
                ppl_count += 1;
            }
            let mut grads = backward_batch_with(&model, &fwd, cfg.weight_decay, objective);
            clip_global_norm(&mut grads, cfg.grad_clip);
            rmsprop_update(&mut model.p, &grads, &mut rms, cfg)?;
        }

        let train_log2ppl = ppl_sum / ppl_count as f64;
        let val_log2ppl = eval_perplexity(&model, val_set)?;
        if !val_log2ppl.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: format!("validation perplexity {}", val_log2ppl),
            });
        }
        if best.as_ref().map_or(true, |(b, _, _)| val_log2ppl < *b) {
            best = Some((val_log2ppl, epoch, model.p.clone()));
        }
        report.push(EpochRecord {
            epoch,
            train_log2ppl,
            val_log2ppl,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    model.p = best_params;
    Ok(TrainOutcome {
        model,
        report,
        best_epoch,
    })
}

/// Convenience for tests: items with exactly one repeated example.
pub fn single_item_dataset(item: &BatchItem, copies: usize) -> Vec<BatchItem> {
    vec![item.clone(); copies]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SPECIALS;
    use crate::linalg::init_vector;
    use crate::model::{ModelDims, UnitIds};

    fn word_id(i: usize) -> usize {
        SPECIALS.len() + i
    }

    fn toy_model(seed: u64, k: usize, v: usize) -> PhiModel {
        PhiModel::new(&mut Rng::new(seed), ModelDims { k, d: 3, v }, 0.1, [0; 32])
    }

    fn toy_items(v_words: usize) -> Vec<BatchItem> {
        let mut rng = Rng::new(5);
        (0..5)
            .map(|i| BatchItem {
                units: vec![
                    UnitIds::Phrase(vec![word_id(i % v_words), word_id((i + 1) % v_words)]),
                    UnitIds::Word(word_id((i + 2) % v_words)),
                ],
                feature: init_vector(&mut rng, 3, 1.0),
            })
            .collect()
    }

    #[test]
    fn rmsprop_zero_gradient_is_noop_on_params() {
        let mut model = toy_model(1, 4, 10);
        let before = model.p.clone();
        let grads = ModelParams::zeros(model.dims);
        let mut state = RmsState::new(&model);
        // seed accumulators away from zero so decay is observable
        state.0.field_slices_mut()[0][0] = 0.5;
        let cfg = TrainConfig::default();
        rmsprop_update(&mut model.p, &grads, &mut state, &cfg).unwrap();
        assert_eq!(model.p, before);
        // accumulator decays toward zero
        assert!((state.0.field_slices()[0][0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_first_step_closed_form() {
        let mut model = PhiModel::zeros(ModelDims { k: 2, d: 2, v: 8 });
        let mut grads = ModelParams::zeros(model.dims);
        grads.field_slices_mut()[0][0] = 1.0;
        let mut state = RmsState::new(&model);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            rms_decay: 0.9,
            rms_epsilon: 0.0,
            ..TrainConfig::default()
        };
        rmsprop_update(&mut model.p, &grads, &mut state, &cfg).unwrap();
        // delta = -0.1 / sqrt(0.1)
        let got = model.p.field_slices()[0][0];
        assert!((got - (-0.31622776601683794)).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn rmsprop_constant_gradient_step_approaches_lr() {
        let mut model = PhiModel::zeros(ModelDims { k: 2, d: 2, v: 8 });
        let mut grads = ModelParams::zeros(model.dims);
        grads.field_slices_mut()[0][0] = 3.0;
        let mut state = RmsState::new(&model);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            rms_epsilon: 0.0,
            ..TrainConfig::default()
        };
        let mut prev = 0.0;
        for _ in 0..200 {
            prev = model.p.field_slices()[0][0];
            rmsprop_update(&mut model.p, &grads, &mut state, &cfg).unwrap();
        }
        let step = model.p.field_slices()[0][0] - prev;
        // s -> g^2, so the step approaches -lr * sign(g)
        assert!((step - (-0.1)).abs() < 1e-3, "step {step}");
    }

    #[test]
    fn rmsprop_rejects_non_finite_gradient() {
        let mut model = toy_model(1, 2, 8);
        let mut grads = ModelParams::zeros(model.dims);
        grads.field_slices_mut()[0][0] = f64::NAN;
        let mut state = RmsState::new(&model);
        assert!(rmsprop_update(&mut model.p, &grads, &mut state, &TrainConfig::default()).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let v = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        let mut rng = Rng::new(1);
        assert_eq!(apply_dropout(&v, 0.0, &mut rng), v);
    }

    #[test]
    fn dropout_mask_reproducible() {
        let a = dropout_mask(32, 0.5, &mut Rng::new(77));
        let b = dropout_mask(32, 0.5, &mut Rng::new(77));
        assert_eq!(a, b);
        assert!(a.0.iter().all(|&m| m == 0.0 || m == 2.0));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let v = Vector::from_vec(vec![2.0; 8]);
        let mut rng = Rng::new(123);
        let trials = 100_000;
        let mut sums = vec![0.0; 8];
        for _ in 0..trials {
            let dropped = apply_dropout(&v, 0.5, &mut rng);
            for (s, x) in sums.iter_mut().zip(&dropped.0) {
                *s += x;
            }
        }
        for s in sums {
            let mean = s / trials as f64;
            assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
        }
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = ModelParams::zeros(ModelDims { k: 2, d: 2, v: 8 });
        grads.field_slices_mut()[0][0] = 3.0;
        let norm = clip_global_norm(&mut grads, 5.0);
        assert_eq!(norm, 3.0);
        assert_eq!(grads.field_slices()[0][0], 3.0);
    }

    #[test]
    fn clip_scales_down_to_threshold() {
        let mut grads = ModelParams::zeros(ModelDims { k: 2, d: 2, v: 8 });
        grads.field_slices_mut()[0][0] = 3.0;
        grads.field_slices_mut()[0][1] = 4.0;
        clip_global_norm(&mut grads, 1.0);
        let n = grads.squared_norm().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let model = toy_model(3, 4, 16);
        let before = model.p.clone();
        let items = toy_items(6);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(model, &items, &items, &cfg).unwrap();
        assert_eq!(out.model.p, before);
    }

    #[test]
    fn training_loss_decreases_on_toy_corpus() {
        let items = toy_items(6);
        let model = toy_model(11, 16, 16);
        let cfg = TrainConfig {
            max_epochs: 10,
            ..TrainConfig::default()
        };
        let out = train(model, &items, &items, &cfg).unwrap();
        for w in out.report.windows(2) {
            assert!(
                w[1].train_log2ppl < w[0].train_log2ppl,
                "epoch {} did not improve: {} -> {}",
                w[1].epoch,
                w[0].train_log2ppl,
                w[1].train_log2ppl
            );
        }
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let items = toy_items(6);
        let cfg = TrainConfig {
            max_epochs: 3,
            dropout_rate: 0.0,
            weight_decay: 0.0,
            grad_clip: f64::INFINITY,
            ..TrainConfig::default()
        };
        let a = train(toy_model(2, 8, 16), &items, &items, &cfg).unwrap();
        let b = train(toy_model(2, 8, 16), &items, &items, &cfg).unwrap();
        assert_eq!(a.model.p, b.model.p);
        for (ra, rb) in a.report.iter().zip(&b.report) {
            assert_eq!(ra.train_log2ppl, rb.train_log2ppl);
            assert_eq!(ra.val_log2ppl, rb.val_log2ppl);
        }
    }

    #[test]
    fn repeated_example_loss_trend_is_downward() {
        let item = &toy_items(6)[0];
        let items = single_item_dataset(item, 1);
        let model = toy_model(9, 8, 16);
        let cfg = TrainConfig {
            max_epochs: 40,
            ..TrainConfig::default()
        };
        let out = train(model, &items, &items, &cfg).unwrap();
        // linear-fit slope over epochs 5.. must be negative; allow transient bumps
        let pts: Vec<(f64, f64)> = out
            .report
            .iter()
            .skip(5)
            .map(|r| (r.epoch as f64, r.train_log2ppl))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!(slope < 0.0, "slope {slope}");
        let bumps = out
            .report
            .windows(2)
            .skip(5)
            .filter(|w| w[1].train_log2ppl > w[0].train_log2ppl * 1.0)
            .count();
        assert!(
            (bumps as f64) < 0.05 * out.report.len() as f64 + 1.0,
            "{bumps} transient increases"
        );
    }

    #[test]
    fn config_json_round_trip_with_exact_field_names() {
        let json = r#"{
            "learning_rate": 0.02,
            "rms_decay": 0.95,
            "rms_epsilon": 1e-6,
            "weight_decay": 1e-5,
            "batch_size": 10,
            "dropout_rate": 0.2,
            "H": 3,
            "max_epochs": 7,
            "grad_clip": 2.5,
            "seed": 9
        }"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.h_distractors, 3);
        assert_eq!(cfg.batch_size, 10);
        let back = serde_json::to_value(&cfg).unwrap();
        assert!(back.get("H").is_some());
        // unknown fields are rejected
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
    }
}
