//! Optimization harness: He initialization, Adam, batch normalization,
//! exponential learning-rate decay, and the ranker training loop.

use crate::autodiff::{Scalar, Tape, Tensor, TensorRef};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Draw a tensor from Normal(0, 2/fan_in), He et al.'s scheme for ReLU nets.
pub fn he_init<T: Scalar, R: Rng>(shape: [usize; 2], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::validation("he_init: fan_in must be at least 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..shape[0] * shape[1])
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    Tensor::new(shape, data)
}

/// Per-parameter Adam accumulators. Moment shapes mirror the parameter list
/// handed to `step`; the step counter is shared across all blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
    pub base_lr: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize], base_lr: f64) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            base_lr,
        }
    }

    /// Bias-corrected Adam update applied in place to every parameter block.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Vec<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: expected {} parameter blocks, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.data.len() != g.len() {
                return Err(Error::shape("adam_step", &p.shape, &[g.len(), 1]));
            }
            for i in 0..g.len() {
                let gi = g[i].to_f64();
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + ADAM_EPS);
                p.data[i] = T::from_f64(p.data[i].to_f64() - upd);
            }
        }
        Ok(())
    }
}

/// lr(epoch) = base_lr * decay^epoch.
pub fn lr_schedule(epoch: u32, base_lr: f64, decay: f64) -> f64 {
    base_lr * decay.powi(epoch as i32)
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        BnState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Batch normalization with learned scale/shift. Train mode normalizes by
/// batch statistics (batch size >= 2) and folds them into the running stats
/// with momentum 0.9; infer mode normalizes by the running stats.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorRef,
    gamma: TensorRef,
    beta: TensorRef,
    state: &mut BnState,
    mode: BnMode,
) -> Result<TensorRef> {
    let n = tape.shape(x)[1];
    if state.running_mean.len() != n {
        return Err(Error::shape("batch_norm", &tape.shape(x), &[1, state.running_mean.len()]));
    }
    match mode {
        BnMode::Train => {
            let xn = tape.batch_norm_rows(x, T::from_f64(BN_EPS))?;
            let (mean, var) = tape.batch_stats(xn).expect("bn node");
            for j in 0..n {
                state.running_mean[j] =
                    BN_MOMENTUM * state.running_mean[j] + (1.0 - BN_MOMENTUM) * mean[j].to_f64();
                state.running_var[j] =
                    BN_MOMENTUM * state.running_var[j] + (1.0 - BN_MOMENTUM) * var[j].to_f64();
            }
            tape.col_scale_shift(xn, gamma, beta)
        }
        BnMode::Infer => {
            let scale: Vec<T> = state
                .running_var
                .iter()
                .map(|&v| T::from_f64(1.0 / (v + BN_EPS).sqrt()))
                .collect();
            let shift: Vec<T> = state
                .running_mean
                .iter()
                .zip(&scale)
                .map(|(&m, &s)| T::from_f64(-m) * s)
                .collect();
            let sc = tape.constant(Tensor::new([1, n], scale)?);
            let sh = tape.constant(Tensor::new([1, n], shift)?);
            let xn = tape.col_scale_shift(x, sc, sh)?;
            tape.col_scale_shift(xn, gamma, beta)
        }
    }
}

/// Ranking-loss selection for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossParadigm {
    Pairwise,
    Listwise,
}

/// Full ranker training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub minibatch: usize,
    pub max_epochs: u32,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub loss: LossParadigm,
    pub phi: crate::losses::PhiKind,
    pub patience: u32,
    pub finetune_dae: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch: 32,
            max_epochs: 150,
            base_lr: 1e-3,
            lr_decay: 0.95,
            seed: 0,
            loss: LossParadigm::Pairwise,
            phi: crate::losses::PhiKind::Logistic,
            patience: 15,
            finetune_dae: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 {
            return Err(Error::validation("minibatch must be >= 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::validation("lr decay must be in (0, 1]"));
        }
        Ok(())
    }
}

/// One per-epoch record of the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub validation_error_rate: f64,
}

/// A request after featurization: frozen autoencoder representations per
/// intent plus the information-state index vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRequest {
    pub intent_reps: Vec<Vec<f32>>,
    pub state_indices: Vec<usize>,
    pub relevances: Vec<u32>,
    pub gold: usize,
}

use crate::losses::{listwise_loss_on_tape, ordered_pairs, pairwise_loss_on_tape, relevance_permutation};
use crate::ranker::{embed_info_state, energy_batch, RankerIds, RankerParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shared forward pass for a batch of requests: returns the score tensor
/// (one row per intent, batch-concatenated) plus per-request offsets.
fn batch_scores(
    tape: &mut Tape<f32>,
    ids: &RankerIds,
    batch: &[&EncodedRequest],
) -> Result<(TensorRef, Vec<usize>)> {
    let mut data = Vec::new();
    let mut map = Vec::new();
    let mut offsets = Vec::with_capacity(batch.len() + 1);
    let mut indices = Vec::with_capacity(batch.len());
    offsets.push(0);
    for (r, req) in batch.iter().enumerate() {
        if req.intent_reps.is_empty() {
            return Err(Error::validation("request with no intents"));
        }
        for rep in &req.intent_reps {
            data.extend_from_slice(rep);
            map.push(r);
        }
        offsets.push(map.len());
        indices.push(req.state_indices.clone());
    }
    let m = map.len();
    let dim = crate::msdae::FUSED_DIM;
    let intents = tape.constant(Tensor::new([m, dim], data)?);
    let states = embed_info_state(tape, &ids.embed, &indices)?;
    let (_, scores) = energy_batch(tape, &ids.tower, intents, states, map)?;
    Ok((scores, offsets))
}

/// Score every request in the set with frozen parameters, in chunks.
pub fn score_requests(
    params: &RankerParams<f32>,
    set: &[&EncodedRequest],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.chunks(64) {
        let mut tape = Tape::<f32>::new();
        let ids = params.bind(&mut tape, false);
        let (scores, offsets) = batch_scores(&mut tape, &ids, chunk)?;
        let vals = &tape.value(scores).data;
        for w in offsets.windows(2) {
            out.push(vals[w[0]..w[1]].iter().map(|&x| x as f64).collect());
        }
    }
    Ok(out)
}

/// Top-1 error rate of the ranker on an encoded set.
pub fn validation_error(params: &RankerParams<f32>, set: &[EncodedRequest]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::validation("validation_error: empty set"));
    }
    let refs: Vec<&EncodedRequest> = set.iter().collect();
    let scores = score_requests(params, &refs)?;
    let preds: Vec<usize> = scores
        .iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect();
    let gold: Vec<usize> = set.iter().map(|r| r.gold).collect();
    crate::evaluator::error_rate(&preds, &gold)
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: u32,
    pub best_validation_error: f64,
}

/// Train the ranker on encoded requests. Minibatches are request-level;
/// pairwise pairs pool within each request, listwise terms average over the
/// batch. Retains the parameters of the best-validation epoch.
pub fn fit(
    params: &mut RankerParams<f32>,
    train: &[EncodedRequest],
    valid: &[EncodedRequest],
    cfg: &TrainConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::validation("fit: empty train or validation set"));
    }
    let sizes: Vec<usize> = params.named_params().iter().map(|(_, t)| t.data.len()).collect();
    let n_blocks = sizes.len();
    let mut adam = AdamState::new(&sizes, cfg.base_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut metrics = Vec::new();
    let mut best = (0u32, f64::INFINITY, params.clone());
    let mut stale = 0u32;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_decay);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&EncodedRequest> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::<f32>::new();
            let ids = params.bind(&mut tape, true);
            let (scores, offsets) = batch_scores(&mut tape, &ids, &batch)?;
            let loss = match cfg.loss {
                LossParadigm::Pairwise => {
                    let mut pairs = Vec::new();
                    for (r, req) in batch.iter().enumerate() {
                        let o = offsets[r];
                        pairs.extend(
                            ordered_pairs(&req.relevances)
                                .into_iter()
                                .map(|(i, j)| (o + i, o + j)),
                        );
                    }
                    pairwise_loss_on_tape(&mut tape, scores, pairs, cfg.phi)?
                }
                LossParadigm::Listwise => {
                    let mut acc = tape.scalar_const(0.0f32);
                    for (r, req) in batch.iter().enumerate() {
                        let o = offsets[r];
                        let rows = tape.slice_rows(scores, o, offsets[r + 1] - o)?;
                        let perm = relevance_permutation(&req.relevances, &mut rng);
                        let term = listwise_loss_on_tape(&mut tape, rows, perm)?;
                        acc = tape.add(acc, term)?;
                    }
                    tape.affine(acc, 1.0 / batch.len() as f32, 0.0)
                }
            };
            let loss_val = tape.value(loss).data[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Contract(format!(
                    "fit: non-finite loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val;
            n_batches += 1;
            if loss_val == 0.0 {
                continue; // no ordered pairs in this batch
            }
            tape.backward(loss)?;
            let named = params.named_params();
            let mut grads = Vec::with_capacity(n_blocks);
            for (i, (_, t)) in named.iter().enumerate() {
                grads.push(
                    tape.grad(TensorRef(i))
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.data.len()]),
                );
            }
            drop(named);
            adam.step(&mut params.named_params_mut(), &grads, lr)?;
        }
        let val_err = validation_error(params, valid)?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: epoch_loss / n_batches as f64,
            validation_error_rate: val_err,
        });
        if val_err < best.1 {
            best = (epoch, val_err, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *params = best.2;
    Ok(FitReport {
        metrics,
        best_epoch: best.0,
        best_validation_error: best.1,
    })
}
