//! Multisource denoising autoencoder: corrupts the (v_s, v_t, v_c) inputs,
//! encodes each source through its own two-layer stack, fuses the three
//! latents into one 500-dim representation, and reconstructs both the hidden
//! states and the denoised inputs. Pretraining minimizes the summed CCE of
//! both reconstruction paths.

use crate::autodiff::{Scalar, Tape, Tensor, TensorRef};
use crate::error::{Error, Result};
use crate::featurizer::{MultiHotTriple, SCORE_BINS, TOKEN_BLOCK_DIM, V_C_DIM, V_S_DIM, V_T_DIM};
use crate::trainer::{batch_norm, he_init, AdamState, BnMode, BnState};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_SOURCES: usize = 3;
pub const SOURCE_DIMS: [usize; NUM_SOURCES] = [V_S_DIM, V_T_DIM, V_C_DIM];
pub const SOURCE_NAMES: [&str; NUM_SOURCES] = ["s", "t", "c"];
pub const ENC1_DIM: usize = 256;
pub const ENC2_DIM: usize = 128;
pub const FUSED_DIM: usize = 500;
pub const CONCAT_DIM: usize = NUM_SOURCES * ENC2_DIM; // 384

/// Block layout of one source vector: (block count, block width).
pub fn block_layout(source: usize) -> (usize, usize) {
    if source == 0 {
        (V_S_DIM / SCORE_BINS, SCORE_BINS)
    } else {
        (V_T_DIM / TOKEN_BLOCK_DIM, TOKEN_BLOCK_DIM)
    }
}

/// Affine-plus-masking corruption applied to the autoencoder inputs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CorruptionConfig {
    pub scale_low: f64,
    pub scale_high: f64,
    pub shift_high: f64,
    pub mask_prob: f64,
    pub enabled: bool,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            scale_low: 0.9,
            scale_high: 1.1,
            shift_high: 0.05,
            mask_prob: 0.1,
            enabled: true,
        }
    }
}

impl CorruptionConfig {
    pub fn disabled() -> Self {
        CorruptionConfig {
            scale_low: 1.0,
            scale_high: 1.0,
            shift_high: 0.0,
            mask_prob: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return Err(Error::validation("corruption: need 0 < scale_low <= scale_high"));
        }
        if self.shift_high < 0.0 {
            return Err(Error::validation("corruption: shift_high must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::validation("corruption: mask_prob must be in [0, 1)"));
        }
        Ok(())
    }
}

fn corrupt_vec<R: Rng>(v: &[f32], cfg: &CorruptionConfig, rng: &mut R) -> Vec<f32> {
    if !cfg.enabled {
        return v.to_vec();
    }
    v.iter()
        .map(|&x| {
            let a = rng.gen_range(cfg.scale_low..=cfg.scale_high);
            let b = if cfg.shift_high > 0.0 {
                rng.gen_range(0.0..=cfg.shift_high)
            } else {
                0.0
            };
            let y = (a * x as f64 + b) as f32;
            if cfg.mask_prob > 0.0 && rng.gen_bool(cfg.mask_prob) {
                0.0
            } else {
                y
            }
        })
        .collect()
}

/// Elementwise x' = a*x + b with a ~ U(scale_low, scale_high) and
/// b ~ U(0, shift_high), then zero-masking with `mask_prob`. The original
/// triple is untouched and remains the reconstruction target.
pub fn corrupt<R: Rng>(
    triple: &MultiHotTriple,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> [Vec<f32>; NUM_SOURCES] {
    [
        corrupt_vec(&triple.v_s, cfg, rng),
        corrupt_vec(&triple.v_t, cfg, rng),
        corrupt_vec(&triple.v_c, cfg, rng),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEncoder<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDecoder<T> {
    /// fused 500 -> hidden reconstruction 128
    pub hdec_w: Tensor<T>,
    pub hdec_b: Tensor<T>,
    /// hidden 128 -> 256 -> source logits
    pub idec1_w: Tensor<T>,
    pub idec1_b: Tensor<T>,
    pub idec2_w: Tensor<T>,
    pub idec2_b: Tensor<T>,
}

/// All MSDAE weights plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Msdae<T> {
    pub enc: Vec<SourceEncoder<T>>,
    pub fuse_w: Tensor<T>,
    pub fuse_b: Tensor<T>,
    pub dec: Vec<SourceDecoder<T>>,
    pub bn_states: Vec<BnState>,
}

/// Tape handles for one bound parameter set, in canonical order.
pub struct MsdaeIds {
    pub enc: Vec<[TensorRef; 6]>,
    pub fuse_w: TensorRef,
    pub fuse_b: TensorRef,
    pub dec: Vec<[TensorRef; 6]>,
}

impl<T: Scalar> Msdae<T> {
    pub fn init<R: Rng>(rng: &mut R) -> Result<Self> {
        let mut enc = Vec::with_capacity(NUM_SOURCES);
        let mut dec = Vec::with_capacity(NUM_SOURCES);
        for &dim in &SOURCE_DIMS {
            enc.push(SourceEncoder {
                w1: he_init([dim, ENC1_DIM], dim, rng)?,
                b1: Tensor::zeros([1, ENC1_DIM]),
                bn_gamma: Tensor::new([1, ENC1_DIM], vec![T::one(); ENC1_DIM])?,
                bn_beta: Tensor::zeros([1, ENC1_DIM]),
                w2: he_init([ENC1_DIM, ENC2_DIM], ENC1_DIM, rng)?,
                b2: Tensor::zeros([1, ENC2_DIM]),
            });
        }
        let fuse_w = he_init([CONCAT_DIM, FUSED_DIM], CONCAT_DIM, rng)?;
        let fuse_b = Tensor::zeros([1, FUSED_DIM]);
        for &dim in &SOURCE_DIMS {
            dec.push(SourceDecoder {
                hdec_w: he_init([FUSED_DIM, ENC2_DIM], FUSED_DIM, rng)?,
                hdec_b: Tensor::zeros([1, ENC2_DIM]),
                idec1_w: he_init([ENC2_DIM, ENC1_DIM], ENC2_DIM, rng)?,
                idec1_b: Tensor::zeros([1, ENC1_DIM]),
                idec2_w: he_init([ENC1_DIM, dim], ENC1_DIM, rng)?,
                idec2_b: Tensor::zeros([1, dim]),
            });
        }
        Ok(Msdae {
            enc,
            fuse_w,
            fuse_b,
            dec,
            bn_states: (0..NUM_SOURCES).map(|_| BnState::new(ENC1_DIM)).collect(),
        })
    }

    /// Canonical (name, tensor) order shared by `bind`, Adam state, and the
    /// checkpoint writer.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, e) in self.enc.iter().enumerate() {
            let s = SOURCE_NAMES[i];
            out.push((format!("msdae.enc.{s}.w1"), &e.w1));
            out.push((format!("msdae.enc.{s}.b1"), &e.b1));
            out.push((format!("msdae.enc.{s}.bn_gamma"), &e.bn_gamma));
            out.push((format!("msdae.enc.{s}.bn_beta"), &e.bn_beta));
            out.push((format!("msdae.enc.{s}.w2"), &e.w2));
            out.push((format!("msdae.enc.{s}.b2"), &e.b2));
        }
        out.push(("msdae.fuse.w".to_string(), &self.fuse_w));
        out.push(("msdae.fuse.b".to_string(), &self.fuse_b));
        for (i, d) in self.dec.iter().enumerate() {
            let s = SOURCE_NAMES[i];
            out.push((format!("msdae.dec.{s}.hdec_w"), &d.hdec_w));
            out.push((format!("msdae.dec.{s}.hdec_b"), &d.hdec_b));
            out.push((format!("msdae.dec.{s}.idec1_w"), &d.idec1_w));
            out.push((format!("msdae.dec.{s}.idec1_b"), &d.idec1_b));
            out.push((format!("msdae.dec.{s}.idec2_w"), &d.idec2_w));
            out.push((format!("msdae.dec.{s}.idec2_b"), &d.idec2_b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for e in self.enc.iter_mut() {
            out.push(&mut e.w1);
            out.push(&mut e.b1);
            out.push(&mut e.bn_gamma);
            out.push(&mut e.bn_beta);
            out.push(&mut e.w2);
            out.push(&mut e.b2);
        }
        out.push(&mut self.fuse_w);
        out.push(&mut self.fuse_b);
        for d in self.dec.iter_mut() {
            out.push(&mut d.hdec_w);
            out.push(&mut d.hdec_b);
            out.push(&mut d.idec1_w);
            out.push(&mut d.idec1_b);
            out.push(&mut d.idec2_w);
            out.push(&mut d.idec2_b);
        }
        out
    }

    pub fn convert<U: Scalar>(&self) -> Msdae<U> {
        let conv = |t: &Tensor<T>| Tensor::<U> {
            shape: t.shape,
            data: t.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        };
        Msdae {
            enc: self
                .enc
                .iter()
                .map(|e| SourceEncoder {
                    w1: conv(&e.w1),
                    b1: conv(&e.b1),
                    bn_gamma: conv(&e.bn_gamma),
                    bn_beta: conv(&e.bn_beta),
                    w2: conv(&e.w2),
                    b2: conv(&e.b2),
                })
                .collect(),
            fuse_w: conv(&self.fuse_w),
            fuse_b: conv(&self.fuse_b),
            dec: self
                .dec
                .iter()
                .map(|d| SourceDecoder {
                    hdec_w: conv(&d.hdec_w),
                    hdec_b: conv(&d.hdec_b),
                    idec1_w: conv(&d.idec1_w),
                    idec1_b: conv(&d.idec1_b),
                    idec2_w: conv(&d.idec2_w),
                    idec2_b: conv(&d.idec2_b),
                })
                .collect(),
            bn_states: self.bn_states.clone(),
        }
    }

    /// Register every parameter on the tape and return the handles. Leaf
    /// order matches `named_params`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> MsdaeIds {
        let refs: Vec<TensorRef> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        let mut it = refs.into_iter();
        let next6 = |it: &mut dyn Iterator<Item = TensorRef>| {
            [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ]
        };
        let enc = (0..NUM_SOURCES).map(|_| next6(&mut it)).collect();
        let fuse_w = it.next().unwrap();
        let fuse_b = it.next().unwrap();
        let dec = (0..NUM_SOURCES).map(|_| next6(&mut it)).collect();
        MsdaeIds {
            enc,
            fuse_w,
            fuse_b,
            dec,
        }
    }
}

/// Two dense+ReLU layers with batch norm after the first, per source.
/// `input` is `[m, source_dim]`; the result is `[m, 128]`.
pub fn encode_source<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &MsdaeIds,
    source: usize,
    input: TensorRef,
    bn_state: &mut BnState,
    mode: BnMode,
) -> Result<TensorRef> {
    let dim = SOURCE_DIMS[source];
    if tape.shape(input)[1] != dim {
        return Err(Error::shape("encode_source", &tape.shape(input), &[0, dim]));
    }
    let [w1, b1, gamma, beta, w2, b2] = ids.enc[source];
    let h = tape.matmul(input, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = batch_norm(tape, h, gamma, beta, bn_state, mode)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_bias(h, b2)?;
    Ok(tape.relu(h))
}

/// concat(h_s, h_t, h_c) -> dense + ReLU -> fused `[m, 500]`.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &MsdaeIds,
    h_s: TensorRef,
    h_t: TensorRef,
    h_c: TensorRef,
) -> Result<TensorRef> {
    let cat = tape.concat_cols(&[h_s, h_t, h_c])?;
    let h = tape.matmul(cat, ids.fuse_w)?;
    let h = tape.add_bias(h, ids.fuse_b)?;
    Ok(tape.relu(h))
}

/// Three dense+ReLU maps from the fused 500-dim state back to the 128-dim
/// per-source hidden reconstructions.
pub fn decode_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &MsdaeIds,
    fused: TensorRef,
) -> Result<[TensorRef; NUM_SOURCES]> {
    if tape.shape(fused)[1] != FUSED_DIM {
        return Err(Error::shape("decode_hidden", &tape.shape(fused), &[0, FUSED_DIM]));
    }
    let mut out = [fused; NUM_SOURCES];
    for (i, slot) in out.iter_mut().enumerate() {
        let [hdec_w, hdec_b, ..] = ids.dec[i];
        let h = tape.matmul(fused, hdec_w)?;
        let h = tape.add_bias(h, hdec_b)?;
        *slot = tape.relu(h);
    }
    Ok(out)
}

/// Dense 128 -> 256 -> source-dim reconstruction logits (per-block softmax
/// is applied by the loss).
pub fn decode_source<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &MsdaeIds,
    source: usize,
    h_prime: TensorRef,
) -> Result<TensorRef> {
    if tape.shape(h_prime)[1] != ENC2_DIM {
        return Err(Error::shape("decode_source", &tape.shape(h_prime), &[0, ENC2_DIM]));
    }
    let [_, _, idec1_w, idec1_b, idec2_w, idec2_b] = ids.dec[source];
    let h = tape.matmul(h_prime, idec1_w)?;
    let h = tape.add_bias(h, idec1_b)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, idec2_w)?;
    tape.add_bias(h, idec2_b)
}

/// Normalize each block of each row to sum 1 (all-zero padding blocks stay
/// zero and are excluded from the loss downstream).
pub fn normalize_block_targets<T: Scalar>(rows: &[Vec<f32>], source: usize) -> Tensor<T> {
    let (blocks, width) = block_layout(source);
    let dim = SOURCE_DIMS[source];
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        for b in 0..blocks {
            let block = &row[b * width..(b + 1) * width];
            let total: f32 = block.iter().sum();
            if total > 0.0 {
                data.extend(block.iter().map(|&x| T::from_f64((x / total) as f64)));
            } else {
                data.extend(std::iter::repeat(T::zero()).take(width));
            }
        }
    }
    Tensor {
        shape: [rows.len(), dim],
        data,
    }
}

/// Forward pass plus combined reconstruction loss for one batch.
///
/// `corrupted` feeds the encoders; `clean` provides the targets. The scalar
/// result is the batch mean of L_h + L_V where L_h compares softmaxed hidden
/// states and L_V applies per-block CCE between the normalized clean blocks
/// and the softmaxed reconstruction blocks.
#[allow(clippy::too_many_arguments)]
pub fn dae_loss_batch<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &MsdaeIds,
    clean: &[&MultiHotTriple],
    corrupted: &[[Vec<f32>; NUM_SOURCES]],
    bn_states: &mut [BnState],
    mode: BnMode,
) -> Result<TensorRef> {
    if clean.is_empty() || clean.len() != corrupted.len() {
        return Err(Error::validation("dae_loss: empty or mismatched batch"));
    }
    let m = clean.len();
    let to_tensor = |rows: Vec<&[f32]>, dim: usize| -> Tensor<T> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend(r.iter().map(|&x| T::from_f64(x as f64)));
        }
        Tensor {
            shape: [m, dim],
            data,
        }
    };

    // encode corrupted inputs
    let mut hidden = Vec::with_capacity(NUM_SOURCES);
    for s in 0..NUM_SOURCES {
        let t = to_tensor(corrupted.iter().map(|c| c[s].as_slice()).collect(), SOURCE_DIMS[s]);
        let input = tape.constant(t);
        hidden.push(encode_source(tape, ids, s, input, &mut bn_states[s], mode)?);
    }
    let fused = fuse(tape, ids, hidden[0], hidden[1], hidden[2])?;
    let hidden_rec = decode_hidden(tape, ids, fused)?;

    // per-sample loss accumulator [m,1]
    let mut acc = tape.constant(Tensor::zeros([m, 1]));

    for s in 0..NUM_SOURCES {
        // hidden-state reconstruction loss
        let target = tape.softmax_rows(hidden[s]);
        let pred = tape.softmax_rows(hidden_rec[s]);
        let lh = tape.cce_rows(target, pred)?;
        acc = tape.add(acc, lh)?;

        // denoised-input reconstruction loss, block by block
        let logits = decode_source(tape, ids, s, hidden_rec[s])?;
        let clean_rows: Vec<&Vec<f32>> = clean
            .iter()
            .map(|t| match s {
                0 => &t.v_s,
                1 => &t.v_t,
                _ => &t.v_c,
            })
            .collect();
        let targets = normalize_block_targets::<T>(
            &clean_rows.iter().map(|v| (*v).clone()).collect::<Vec<_>>(),
            s,
        );
        let target_ref = tape.constant(targets);
        let (blocks, width) = block_layout(s);
        for b in 0..blocks {
            let tb = tape.slice_cols(target_ref, b * width, width)?;
            let lb = tape.slice_cols(logits, b * width, width)?;
            let pb = tape.softmax_rows(lb);
            let lv = tape.cce_rows(tb, pb)?;
            acc = tape.add(acc, lv)?;
        }
    }
    let total = tape.sum(acc);
    Ok(tape.affine(total, T::one() / T::from_f64(m as f64), T::zero()))
}

/// Encode clean triples with frozen parameters (batch-norm in infer mode).
/// Returns one 500-dim fused representation per triple.
pub fn encode_frozen<T: Scalar>(model: &Msdae<T>, triples: &[&MultiHotTriple]) -> Result<Vec<Vec<T>>> {
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::<T>::new();
    let ids = model.bind(&mut tape, false);
    let mut bn = model.bn_states.clone();
    let m = triples.len();
    let mut hidden = Vec::with_capacity(NUM_SOURCES);
    for s in 0..NUM_SOURCES {
        let dim = SOURCE_DIMS[s];
        let mut data = Vec::with_capacity(m * dim);
        for t in triples {
            let v = match s {
                0 => &t.v_s,
                1 => &t.v_t,
                _ => &t.v_c,
            };
            data.extend(v.iter().map(|&x| T::from_f64(x as f64)));
        }
        let input = tape.constant(Tensor {
            shape: [m, dim],
            data,
        });
        hidden.push(encode_source(&mut tape, &ids, s, input, &mut bn[s], BnMode::Infer)?);
    }
    let fused = fuse(&mut tape, &ids, hidden[0], hidden[1], hidden[2])?;
    let v = tape.value(fused);
    Ok((0..m).map(|i| v.data[i * FUSED_DIM..(i + 1) * FUSED_DIM].to_vec()).collect())
}

/// Pretraining settings. Learning rate follows `lr_schedule`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: u32,
    pub minibatch: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub corruption: CorruptionConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            minibatch: 32,
            base_lr: 1e-3,
            lr_decay: 0.95,
            seed: 0,
            corruption: CorruptionConfig::default(),
        }
    }
}

/// Minimize the mean reconstruction loss over the dataset; returns the mean
/// loss per epoch.
pub fn pretrain(
    model: &mut Msdae<f32>,
    dataset: &[MultiHotTriple],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::validation("pretrain: empty dataset"));
    }
    cfg.corruption.validate()?;
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.data.len()).collect();
    let mut adam = AdamState::new(&sizes, cfg.base_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs as usize);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = crate::trainer::lr_schedule(epoch, cfg.base_lr, cfg.lr_decay);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.minibatch) {
            let clean: Vec<&MultiHotTriple> = chunk.iter().map(|&i| &dataset[i]).collect();
            let corrupted: Vec<[Vec<f32>; NUM_SOURCES]> = clean
                .iter()
                .map(|t| corrupt(t, &cfg.corruption, &mut rng))
                .collect();
            let mut tape = Tape::<f32>::new();
            let ids = model.bind(&mut tape, true);
            let loss = dae_loss_batch(
                &mut tape,
                &ids,
                &clean,
                &corrupted,
                &mut model.bn_states,
                BnMode::Train,
            )?;
            let loss_val = tape.value(loss).data[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Contract(format!(
                    "pretrain: non-finite loss at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = {
                let named = model.named_params();
                let mut bound = Vec::with_capacity(named.len());
                // leaves were pushed first, in named order
                for (i, (_, t)) in named.iter().enumerate() {
                    let r = TensorRef(i);
                    bound.push(
                        tape.grad(r)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; t.data.len()]),
                    );
                }
                bound
            };
            let mut params = model.named_params_mut();
            adam.step(&mut params, &grads, lr)?;
            epoch_loss += loss_val * clean.len() as f64;
            seen += clean.len();
        }
        curve.push(epoch_loss / seen as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::{encode_intent, FeaturizerSalts, IntentCandidate, NUM_SCORES};

    pub(crate) fn fixture_triple(seed: u64) -> MultiHotTriple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_tokens = rng.gen_range(2..8);
        let intent = IntentCandidate {
            scores: (0..NUM_SCORES).map(|_| rng.gen_range(0.0..=1.0)).collect(),
            tokens: (0..n_tokens).map(|i| format!("tok{}_{}", seed, i)).collect(),
            slot_labels: (0..n_tokens).map(|i| format!("Slot{}", i % 4)).collect(),
            relevance: 0,
        };
        encode_intent(&intent, FeaturizerSalts::default()).unwrap()
    }

    #[test]
    fn corrupt_disabled_is_identity() {
        let t = fixture_triple(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = corrupt(&t, &CorruptionConfig::disabled(), &mut rng);
        assert_eq!(c[0], t.v_s);
        assert_eq!(c[1], t.v_t);
        assert_eq!(c[2], t.v_c);
    }

    #[test]
    fn corrupt_full_mask_zeroes_everything() {
        let t = fixture_triple(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CorruptionConfig {
            mask_prob: 0.999_999_999,
            ..Default::default()
        };
        let c = corrupt(&t, &cfg, &mut rng);
        assert!(c.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn corrupt_mask_rate_matches_config() {
        // ~10% of set bits zeroed with default config over many trials
        let t = fixture_triple(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CorruptionConfig::default();
        let mut zeroed = 0usize;
        let mut total = 0usize;
        for _ in 0..10_000 {
            let c = corrupt(&t, &cfg, &mut rng);
            for (orig, cor) in t.v_s.iter().chain(&t.v_t).zip(c[0].iter().chain(&c[1])) {
                if *orig > 0.0 {
                    total += 1;
                    if *cor == 0.0 {
                        zeroed += 1;
                    }
                }
            }
        }
        let frac = zeroed as f64 / total as f64;
        assert!((frac - 0.1).abs() < 0.01, "zeroed fraction {frac}");
    }

    #[test]
    fn corruption_config_validation() {
        let mut cfg = CorruptionConfig::default();
        cfg.scale_low = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CorruptionConfig::default();
        cfg.mask_prob = 1.0;
        assert!(cfg.validate().is_err());
    }

    fn small_forward_shapes(mode: BnMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Msdae::<f32>::init(&mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let ids = model.bind(&mut tape, false);
        let mut bn = model.bn_states.clone();
        let triples = [fixture_triple(1), fixture_triple(2)];
        let clean: Vec<&MultiHotTriple> = triples.iter().collect();
        let mut hidden = Vec::new();
        for s in 0..NUM_SOURCES {
            let dim = SOURCE_DIMS[s];
            let mut data = Vec::new();
            for t in &clean {
                let v = match s {
                    0 => &t.v_s,
                    1 => &t.v_t,
                    _ => &t.v_c,
                };
                data.extend(v.iter().copied());
            }
            let input = tape.constant(Tensor::new([2, dim], data).unwrap());
            let h = encode_source(&mut tape, &ids, s, input, &mut bn[s], mode).unwrap();
            assert_eq!(tape.shape(h), [2, ENC2_DIM]);
            hidden.push(h);
        }
        let fused = fuse(&mut tape, &ids, hidden[0], hidden[1], hidden[2]).unwrap();
        assert_eq!(tape.shape(fused), [2, FUSED_DIM]);
        // fused representation is a ReLU output
        assert!(tape.value(fused).data.iter().all(|&x| x >= 0.0));
        let rec = decode_hidden(&mut tape, &ids, fused).unwrap();
        for (s, &r) in rec.iter().enumerate() {
            assert_eq!(tape.shape(r), [2, ENC2_DIM]);
            let logits = decode_source(&mut tape, &ids, s, r).unwrap();
            assert_eq!(tape.shape(logits), [2, SOURCE_DIMS[s]]);
        }
    }

    #[test]
    fn forward_shape_contracts() {
        small_forward_shapes(BnMode::Train);
        small_forward_shapes(BnMode::Infer);
    }

    #[test]
    fn encode_source_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Msdae::<f32>::init(&mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let ids = model.bind(&mut tape, false);
        let mut bn = model.bn_states.clone();
        let input = tape.constant(Tensor::zeros([2, 7]));
        assert!(encode_source(&mut tape, &ids, 0, input, &mut bn[0], BnMode::Infer).is_err());
    }

    #[test]
    fn fusion_order_is_load_bearing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Msdae::<f32>::init(&mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let ids = model.bind(&mut tape, false);
        let a = tape.constant(Tensor::new([1, ENC2_DIM], (0..ENC2_DIM).map(|i| i as f32 / 128.0).collect()).unwrap());
        let b = tape.constant(Tensor::new([1, ENC2_DIM], (0..ENC2_DIM).map(|i| (ENC2_DIM - i) as f32 / 128.0).collect()).unwrap());
        let c = tape.constant(Tensor::zeros([1, ENC2_DIM]));
        let f1 = fuse(&mut tape, &ids, a, b, c).unwrap();
        let f2 = fuse(&mut tape, &ids, b, a, c).unwrap();
        assert_ne!(tape.value(f1).data, tape.value(f2).data);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_fused() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Msdae::<f32>::init(&mut rng).unwrap();
        // biases are zero-initialized; gamma 1 / beta 0 and unit running stats
        // keep the infer-mode batch norm at identity on zeros
        let mut tape = Tape::<f32>::new();
        let ids = model.bind(&mut tape, false);
        let mut bn = model.bn_states.clone();
        let zeros = tape.constant(Tensor::zeros([1, SOURCE_DIMS[0]]));
        let h = encode_source(&mut tape, &ids, 0, zeros, &mut bn[0], BnMode::Infer).unwrap();
        assert!(tape.value(h).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dae_loss_nonnegative_and_near_uniform_baseline_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = Msdae::<f32>::init(&mut rng).unwrap();
        let triples: Vec<MultiHotTriple> = (0..8).map(|i| fixture_triple(i)).collect();
        let clean: Vec<&MultiHotTriple> = triples.iter().collect();
        let corrupted: Vec<[Vec<f32>; 3]> = clean
            .iter()
            .map(|t| corrupt(t, &CorruptionConfig::disabled(), &mut rng))
            .collect();
        let mut tape = Tape::<f32>::new();
        let ids = model.bind(&mut tape, true);
        let mut bn = model.bn_states.clone();
        let loss = dae_loss_batch(&mut tape, &ids, &clean, &corrupted, &mut bn, BnMode::Train).unwrap();
        let val = tape.value(loss).data[0] as f64;
        assert!(val >= 0.0);

        // analytic uniform baseline: ln(width) per non-empty block plus the
        // three hidden terms at roughly ln(128) each
        let mut baseline = 0.0;
        for (s, t) in [(0usize, &clean), (1, &clean), (2, &clean)] {
            let (blocks, width) = block_layout(s);
            let mut non_empty = 0usize;
            for tr in t.iter() {
                let v = match s {
                    0 => &tr.v_s,
                    1 => &tr.v_t,
                    _ => &tr.v_c,
                };
                for b in 0..blocks {
                    if v[b * width..(b + 1) * width].iter().any(|&x| x > 0.0) {
                        non_empty += 1;
                    }
                }
            }
            baseline += (non_empty as f64 / t.len() as f64) * (width as f64).ln();
        }
        baseline += 3.0 * (ENC2_DIM as f64).ln();
        assert!(
            (val - baseline).abs() / baseline < 0.2,
            "loss {val} vs uniform baseline {baseline}"
        );
    }

    #[test]
    fn dae_loss_deterministic_under_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let model = Msdae::<f32>::init(&mut rng).unwrap();
            let t = fixture_triple(4);
            let clean = vec![&t, &t];
            let corrupted: Vec<[Vec<f32>; 3]> = clean
                .iter()
                .map(|t| corrupt(t, &CorruptionConfig::default(), &mut rng))
                .collect();
            let mut tape = Tape::<f32>::new();
            let ids = model.bind(&mut tape, false);
            let mut bn = model.bn_states.clone();
            let loss =
                dae_loss_batch(&mut tape, &ids, &clean, &corrupted, &mut bn, BnMode::Train).unwrap();
            tape.value(loss).data[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Msdae::<f32>::init(&mut rng).unwrap();
        assert!(pretrain(&mut model, &[], &PretrainConfig::default()).is_err());
    }

    #[test]
    fn memorization_without_corruption_drives_loss_down() {
        // 10-sample fixture, corruption disabled: loss should fall well below
        // its initial value within a modest number of epochs
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = Msdae::<f32>::init(&mut rng).unwrap();
        let data: Vec<MultiHotTriple> = (0..10).map(|i| fixture_triple(100 + i)).collect();
        let cfg = PretrainConfig {
            epochs: 60,
            minibatch: 10,
            base_lr: 2e-3,
            lr_decay: 0.98,
            seed: 17,
            corruption: CorruptionConfig::disabled(),
        };
        let curve = pretrain(&mut model, &data, &cfg).unwrap();
        assert!(curve.iter().all(|l| l.is_finite()));
        let first = curve[0];
        let last = *curve.last().unwrap();
        assert!(last < 0.3 * first, "first {first}, last {last}");
    }
}
