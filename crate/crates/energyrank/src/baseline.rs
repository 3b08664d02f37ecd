//! Logistic-regression pairwise ranker over flattened features. Serves as
//! the simplest reference point; it shares the pairwise loss and the
//! evaluator with the main model.

use crate::autodiff::{Tape, Tensor, TensorRef};
use crate::dataset::RequestRecord;
use crate::error::{Error, Result};
use crate::evaluator::error_rate;
use crate::featurizer::{
    encode_intent, hash_token, FeaturizerSalts, IntentCandidate, InformationState,
    HASHES_PER_TOKEN, TOKEN_BLOCK_DIM, V_S_DIM,
};
use crate::losses::{ordered_pairs, pairwise_loss_on_tape};
use crate::trainer::{lr_schedule, AdamState, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INFO_HASH_DIM: usize = 128;
const INFO_SALT: u64 = 0xfeed_5a17_ba5e_11ab;
/// v_s (121) + max-pooled token blocks (50) + max-pooled slot blocks (50)
/// + hashed info-state (128).
pub const BASELINE_DIM: usize = V_S_DIM + 2 * TOKEN_BLOCK_DIM + INFO_HASH_DIM;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRankerParams {
    pub w: Tensor<f32>,
    pub b: f32,
}

impl LinearRankerParams {
    pub fn zeros() -> Self {
        LinearRankerParams {
            w: Tensor::zeros([BASELINE_DIM, 1]),
            b: 0.0,
        }
    }
}

fn max_pool_blocks(v: &[f32], block: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; block];
    for chunk in v.chunks(block) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            if x > *o {
                *o = x;
            }
        }
    }
    out
}

fn hash_info_state(state: &InformationState) -> Vec<f32> {
    let mut v = vec![0.0f32; INFO_HASH_DIM];
    for (name, value) in &state.attributes {
        let joined = format!("{name}={value}");
        for (i, &x) in hash_token(&joined, INFO_HASH_DIM, HASHES_PER_TOKEN, INFO_SALT)
            .iter()
            .enumerate()
        {
            if x > v[i] {
                v[i] = x;
            }
        }
    }
    v
}

/// Flatten one intent plus its request's information-state into the
/// baseline feature vector.
pub fn baseline_features(
    intent: &IntentCandidate,
    state: &InformationState,
    salts: FeaturizerSalts,
) -> Result<Vec<f32>> {
    let triple = encode_intent(intent, salts)?;
    let mut out = Vec::with_capacity(BASELINE_DIM);
    out.extend_from_slice(&triple.v_s);
    out.extend(max_pool_blocks(&triple.v_t, TOKEN_BLOCK_DIM));
    out.extend(max_pool_blocks(&triple.v_c, TOKEN_BLOCK_DIM));
    out.extend(hash_info_state(state));
    debug_assert_eq!(out.len(), BASELINE_DIM);
    Ok(out)
}

fn scores_on_tape(
    tape: &mut Tape<f32>,
    w: TensorRef,
    b: TensorRef,
    features: &[Vec<f32>],
) -> Result<TensorRef> {
    let m = features.len();
    let mut data = Vec::with_capacity(m * BASELINE_DIM);
    for f in features {
        if f.len() != BASELINE_DIM {
            return Err(Error::shape("baseline_score", &[1, f.len()], &[1, BASELINE_DIM]));
        }
        data.extend_from_slice(f);
    }
    let x = tape.constant(Tensor::new([m, BASELINE_DIM], data)?);
    let z = tape.matmul(x, w)?;
    let zb = tape.add_bias(z, b)?;
    Ok(tape.sigmoid(zb))
}

/// sigmoid(w . x + b) for each intent of one encoded request.
pub fn baseline_score(params: &LinearRankerParams, features: &[Vec<f32>]) -> Result<Vec<f64>> {
    let mut tape = Tape::<f32>::new();
    let w = tape.constant(params.w.clone());
    let b = tape.constant(Tensor::new([1, 1], vec![params.b])?);
    let s = scores_on_tape(&mut tape, w, b, features)?;
    Ok(tape.value(s).data.iter().map(|&x| x as f64).collect())
}

/// Featurized request set, gold indices alongside.
pub struct BaselineSet {
    pub features: Vec<Vec<Vec<f32>>>,
    pub relevances: Vec<Vec<u32>>,
    pub gold: Vec<usize>,
}

pub fn baseline_encode(records: &[RequestRecord], salts: FeaturizerSalts) -> Result<BaselineSet> {
    let mut features = Vec::with_capacity(records.len());
    let mut relevances = Vec::with_capacity(records.len());
    let mut gold = Vec::with_capacity(records.len());
    for r in records {
        features.push(
            r.intents
                .iter()
                .map(|c| baseline_features(c, &r.info_state, salts))
                .collect::<Result<_>>()?,
        );
        relevances.push(r.relevances());
        gold.push(r.gold_index()?);
    }
    Ok(BaselineSet {
        features,
        relevances,
        gold,
    })
}

/// Train the linear ranker with the pairwise loss; returns the final
/// parameters (best validation error retained).
pub fn baseline_fit(
    train: &BaselineSet,
    valid: &BaselineSet,
    cfg: &TrainConfig,
) -> Result<LinearRankerParams> {
    cfg.validate()?;
    if train.features.is_empty() || valid.features.is_empty() {
        return Err(Error::validation("baseline_fit: empty set"));
    }
    let mut params = LinearRankerParams::zeros();
    let mut adam = AdamState::new(&[BASELINE_DIM, 1], cfg.base_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.features.len()).collect();
    let mut best = (f64::INFINITY, params.clone());
    let mut stale = 0u32;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_decay);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let mut feats = Vec::new();
            let mut pairs = Vec::new();
            for &ri in chunk {
                let o = feats.len();
                feats.extend(train.features[ri].iter().cloned());
                pairs.extend(
                    ordered_pairs(&train.relevances[ri])
                        .into_iter()
                        .map(|(i, j)| (o + i, o + j)),
                );
            }
            if pairs.is_empty() {
                continue;
            }
            let mut tape = Tape::<f32>::new();
            let w = tape.leaf(params.w.clone(), true);
            let b = tape.leaf(Tensor::new([1, 1], vec![params.b])?, true);
            let s = scores_on_tape(&mut tape, w, b, &feats)?;
            let loss = pairwise_loss_on_tape(&mut tape, s, pairs, cfg.phi)?;
            tape.backward(loss)?;
            let gw = tape.grad(w).map(|g| g.to_vec()).unwrap_or_default();
            let gb = tape.grad(b).map(|g| g.to_vec()).unwrap_or_default();
            let mut bt = Tensor::new([1, 1], vec![params.b])?;
            adam.step(&mut [&mut params.w, &mut bt], &[gw, gb], lr)?;
            params.b = bt.data[0];
        }
        let err = baseline_error(&params, valid)?;
        if err < best.0 {
            best = (err, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(best.1)
}

pub fn baseline_error(params: &LinearRankerParams, set: &BaselineSet) -> Result<f64> {
    let mut preds = Vec::with_capacity(set.features.len());
    for feats in &set.features {
        let scores = baseline_score(params, feats)?;
        preds.push(crate::pipeline::argmax(&scores));
    }
    error_rate(&preds, &set.gold)
}
