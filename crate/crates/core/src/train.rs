//! Two-stage decoupled training.
//!
//! Stage 1 ("representation") trains every parameter on the natural
//! long-tailed distribution with cross-entropy plus the two distillation
//! terms. Stage 2 ("classifier") re-initializes each expert's head and
//! retrains only the heads with balanced softmax cross-entropy while the
//! rest of the network stays frozen, its batch-norm layers in inference
//! mode. Both stages use momentum SGD with weight decay and a cosine
//! schedule decaying to zero; the schedule restarts for stage 2.

use std::f64::consts::PI;
use std::fmt;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Augment, LabeledDataset, NoAugment};
use crate::error::{Error, Result};
use crate::losses::{bsce_objective, stage1_objective, ExpertReduction, LossWeights};
use crate::model::{argmax, MoEModel, ParamGroup, Trainable};
use crate::nn::{l2_norm, Mode, Param};
use crate::rng;

/// Optimization settings shared by both stages. Serialized flat: the loss
/// weights appear as top-level `alpha`, `beta` and `temperature` keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub ce_reduction: ExpertReduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 180,
            epochs_stage2: 20,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            weights: LossWeights::default(),
            ce_reduction: ExpertReduction::Sum,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Representation,
    Classifier,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Representation => "representation",
            Stage::Classifier => "classifier",
        })
    }
}

/// One row of the per-epoch metric log. In the classifier stage `total`
/// holds the balanced softmax loss and the distillation columns are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub ce: f64,
    pub nt: f64,
    pub mu: f64,
    pub total: f64,
    pub train_accuracy: f64,
    /// Largest gradient norm observed on a frozen parameter during the epoch.
    pub frozen_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: MoEModel,
    /// Momentum buffers, one per parameter in visiting order.
    pub velocity: Vec<Vec<f64>>,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub stage: Stage,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: MoEModel) -> Self {
        let mut velocity = Vec::new();
        model.for_each_param(&mut |_, _, p| velocity.push(vec![0.0; p.len()]));
        TrainState {
            model,
            velocity,
            epoch: 0,
            stage: Stage::Representation,
            history: Vec::new(),
        }
    }
}

/// `base_lr * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::invalid("total_epochs", "must be positive"));
    }
    if epoch > total_epochs {
        return Err(Error::invalid(
            "epoch",
            format!("{epoch} exceeds the schedule length {total_epochs}"),
        ));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}

fn sgd_update(p: &mut Param, v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
        let d = g + weight_decay * *w;
        *vel = momentum * *vel + d;
        *w -= lr * *vel;
    }
}

/// One momentum-SGD step on the trainable groups; returns the largest
/// gradient norm seen on a frozen parameter.
fn sgd_step(state: &mut TrainState, trainable: Trainable, lr: f64, cfg: &TrainConfig) -> f64 {
    let mut i = 0;
    let mut frozen_norm: f64 = 0.0;
    let velocity = &mut state.velocity;
    state.model.for_each_param_mut(&mut |_, group, p| {
        if trainable.allows(group) {
            sgd_update(p, &mut velocity[i], lr, cfg.momentum, cfg.weight_decay);
        } else {
            frozen_norm = frozen_norm.max(l2_norm(&p.grad));
        }
        i += 1;
    });
    frozen_norm
}

/// Sample order of one epoch: a permutation of `0..n` that depends only on
/// `(seed, stage, epoch)`.
pub fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let tag = match stage {
        Stage::Representation => rng::tag::SHUFFLE_STAGE1,
        Stage::Classifier => rng::tag::SHUFFLE_STAGE2,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[tag, epoch as u64]);
    order.shuffle(&mut r);
    order
}

fn logits_dump(logits: &[Array2<f64>], labels: &[usize]) -> String {
    let rows: Vec<Vec<Vec<f64>>> = logits.iter().map(|z| z.outer_iter().map(|r| r.to_vec()).collect()).collect();
    serde_json::json!({ "labels": labels, "logits": rows }).to_string()
}

fn check_stage(state: &TrainState, want: Stage) -> Result<()> {
    if state.stage != want {
        return Err(Error::WrongStage {
            expected: want.to_string(),
            found: state.stage.to_string(),
        });
    }
    Ok(())
}

/// Stage-1 training from a fresh model.
pub fn train_stage1(model: MoEModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(model);
    run_stage1(&mut state, data, cfg, None, &NoAugment)?;
    Ok(state)
}

/// Continue stage 1 from `state.epoch` up to `until` (default: the full
/// schedule). Data order of epoch `e` depends only on `(seed, e)`, so an
/// interrupted and resumed run matches an uninterrupted one.
pub fn run_stage1(
    state: &mut TrainState,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    until: Option<usize>,
    augment: &dyn Augment,
) -> Result<()> {
    cfg.validate()?;
    check_stage(state, Stage::Representation)?;
    if data.num_classes() != state.model.num_classes() {
        return Err(Error::ShapeMismatch {
            context: "dataset classes vs model classes",
            expected: state.model.num_classes().to_string(),
            actual: data.num_classes().to_string(),
        });
    }
    let end = until.unwrap_or(cfg.epochs_stage1).min(cfg.epochs_stage1);
    while state.epoch < end {
        let e = state.epoch;
        let lr = cosine_lr(e, cfg.epochs_stage1, cfg.base_lr)?;
        let order = epoch_order(data.len(), cfg.seed, Stage::Representation, e);
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        let mut frozen = 0.0f64;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx);
            let x = augment.apply(x, data.input_shape(), e);
            state.model.zero_grad();
            let (out, cache) = state.model.forward_train(&x, Mode::Train)?;
            let (br, grads) = stage1_objective(&out.logits, &y, &cfg.weights, cfg.ce_reduction)
                .map_err(|err| match err {
                    Error::NonFinite(_) => Error::Diverged {
                        stage: "representation",
                        epoch: e,
                        batch: bi,
                        dump: logits_dump(&out.logits, &y),
                    },
                    other => other,
                })?;
            if !br.total.is_finite() {
                return Err(Error::Diverged {
                    stage: "representation",
                    epoch: e,
                    batch: bi,
                    dump: logits_dump(&out.logits, &y),
                });
            }
            state.model.backward(&cache, &grads, Trainable::ALL);
            frozen = frozen.max(sgd_step(state, Trainable::ALL, lr, cfg));
            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([br.ce, br.nt, br.mu, br.total]) {
                *s += v * w;
            }
            correct += out
                .ensemble
                .outer_iter()
                .zip(&y)
                .filter(|(r, &t)| argmax(r.as_slice().expect("row")) == t)
                .count();
        }
        let n = data.len() as f64;
        state.history.push(EpochMetrics {
            epoch: e,
            stage: Stage::Representation,
            lr,
            ce: sums[0] / n,
            nt: sums[1] / n,
            mu: sums[2] / n,
            total: sums[3] / n,
            train_accuracy: correct as f64 / n,
            frozen_grad_norm: frozen,
        });
        state.epoch += 1;
    }
    Ok(())
}

/// Switch a finished representation state to classifier retraining:
/// fresh heads, fresh momentum, epoch counter reset.
pub fn begin_stage2(state: &mut TrainState, cfg: &TrainConfig) -> Result<()> {
    check_stage(state, Stage::Representation)?;
    state
        .model
        .reinit_heads(rng::derive_seed(cfg.seed, &[rng::tag::HEAD_REINIT]));
    state.velocity.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
    state.model.zero_grad();
    state.stage = Stage::Classifier;
    state.epoch = 0;
    Ok(())
}

/// Pooled head inputs of the frozen network for every sample, in chunks.
pub fn frozen_features(model: &MoEModel, data: &LabeledDataset, chunk: usize) -> Result<Vec<Array2<f64>>> {
    let mut parts: Vec<Vec<Array2<f64>>> = vec![Vec::new(); model.num_experts()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let (x, _) = data.batch(c);
        for (acc, f) in parts.iter_mut().zip(model.head_inputs(&x)?) {
            acc.push(f);
        }
    }
    Ok(parts
        .into_iter()
        .map(|p| {
            let views: Vec<_> = p.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("consistent feature widths")
        })
        .collect())
}

/// Stage-2 classifier retraining on a representation-stage state.
pub fn train_stage2(mut state: TrainState, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainState> {
    begin_stage2(&mut state, cfg)?;
    run_stage2(&mut state, data, cfg, None)?;
    Ok(state)
}

/// Continue stage 2 from `state.epoch` up to `until` (default: all epochs).
pub fn run_stage2(state: &mut TrainState, data: &LabeledDataset, cfg: &TrainConfig, until: Option<usize>) -> Result<()> {
    cfg.validate()?;
    check_stage(state, Stage::Classifier)?;
    let counts = data.spec().counts().to_vec();
    let end = until.unwrap_or(cfg.epochs_stage2).min(cfg.epochs_stage2);
    if state.epoch >= end {
        return Ok(());
    }
    let feats = frozen_features(&state.model, data, 512)?;
    while state.epoch < end {
        let e = state.epoch;
        let lr = cosine_lr(e, cfg.epochs_stage2, cfg.base_lr)?;
        let order = epoch_order(data.len(), cfg.seed, Stage::Classifier, e);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut frozen = 0.0f64;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let inputs: Vec<Array2<f64>> = feats.iter().map(|f| f.select(Axis(0), idx)).collect();
            state.model.zero_grad();
            let logits: Vec<Array2<f64>> = state
                .model
                .experts()
                .iter()
                .zip(&inputs)
                .map(|(ex, h)| ex.head.forward(h))
                .collect();
            let (value, grads) = bsce_objective(&logits, &y, &counts)?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "classifier",
                    epoch: e,
                    batch: bi,
                    dump: logits_dump(&logits, &y),
                });
            }
            for ((ex, h), g) in state.model.experts_mut().iter_mut().zip(&inputs).zip(&grads) {
                ex.head.backward(h, g, false);
            }
            frozen = frozen.max(sgd_step(state, Trainable::HEADS_ONLY, lr, cfg));
            loss_sum += value * idx.len() as f64;
            let mut ens = logits[0].clone();
            for z in &logits[1..] {
                ens += z;
            }
            correct += ens
                .outer_iter()
                .zip(&y)
                .filter(|(r, &t)| argmax(r.as_slice().expect("row")) == t)
                .count();
        }
        let n = data.len() as f64;
        state.history.push(EpochMetrics {
            epoch: e,
            stage: Stage::Classifier,
            lr,
            ce: 0.0,
            nt: 0.0,
            mu: 0.0,
            total: loss_sum / n,
            train_accuracy: correct as f64 / n,
            frozen_grad_norm: frozen,
        });
        state.epoch += 1;
    }
    Ok(())
}

/// Both stages back to back.
pub fn train_two_stage(model: MoEModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainState> {
    let state = train_stage1(model, data, cfg)?;
    train_stage2(state, data, cfg)
}

/// Names of the parameters in each group, in visiting order.
pub fn param_names(model: &MoEModel) -> Vec<(String, ParamGroup)> {
    let mut out = Vec::new();
    model.for_each_param(&mut |n, g, _| out.push((n.to_string(), g)));
    out
}

/// Write the metric history as CSV.
pub fn write_metrics_csv<W: std::io::Write>(history: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "stage", "lr", "L_ce", "L_nt", "L_mu", "total", "train_accuracy"])?;
    for m in history {
        w.write_record([
            m.epoch.to_string(),
            m.stage.to_string(),
            format!("{}", m.lr),
            format!("{}", m.ce),
            format!("{}", m.nt),
            format!("{}", m.mu),
            format!("{}", m.total),
            format!("{}", m.train_accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}
