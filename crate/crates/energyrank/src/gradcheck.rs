//! Central finite-difference oracle for analytic gradients.
//!
//! Runs in 64-bit precision. The closure rebuilds the forward graph from
//! scratch on every call, so the check stays independent of any cached state
//! in the implementation under test.

use crate::autodiff::{Tape, Tensor, TensorRef};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Per-parameter-block outcome.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() <= tolerance
    }
}

/// Forward builder: given a fresh tape and the parameter leaves (same order
/// as the `params` argument), produce a scalar loss.
pub type ForwardFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[TensorRef]) -> Result<TensorRef>;

fn eval_loss(params: &[(String, Tensor<f64>)], forward: ForwardFn, grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let refs: Vec<TensorRef> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), grad))
        .collect();
    let loss = forward(&mut tape, &refs)?;
    if tape.shape(loss) != [1, 1] {
        return Err(Error::Contract("gradcheck: closure must produce a scalar loss".into()));
    }
    let val = tape.value(loss).data[0];
    let grads = if grad {
        tape.backward(loss)?;
        refs.iter()
            .map(|&r| {
                tape.grad(r)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(r).data.len()])
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok((val, grads))
}

/// Relative error between the analytic gradient and a central difference at
/// one coordinate. Mismatches are usually the difference stencil straddling
/// a ReLU-style kink rather than a wrong gradient, so on a large error the
/// stencil is retried at smaller steps and the best agreement kept. The
/// denominator floor compares negligible gradients at a 1e-4 absolute scale.
fn coord_rel_err(
    work: &mut [(String, Tensor<f64>)],
    forward: ForwardFn,
    bi: usize,
    c: usize,
    an: f64,
) -> Result<f64> {
    let mut rel_at = |step: f64| -> Result<f64> {
        let orig = work[bi].1.data[c];
        work[bi].1.data[c] = orig + step;
        let (lp, _) = eval_loss(work, forward, false)?;
        work[bi].1.data[c] = orig - step;
        let (lm, _) = eval_loss(work, forward, false)?;
        work[bi].1.data[c] = orig;
        let fd = (lp - lm) / (2.0 * step);
        let denom = an.abs().max(fd.abs()).max(1e-4);
        Ok((an - fd).abs() / denom)
    };
    let mut rel = rel_at(FD_STEP)?;
    for shrink in [8.0, 64.0] {
        if rel <= 5e-5 {
            break;
        }
        rel = rel.min(rel_at(FD_STEP / shrink)?);
    }
    Ok(rel)
}

fn check_determinism(params: &[(String, Tensor<f64>)], forward: ForwardFn) -> Result<Vec<Vec<f64>>> {
    let (l1, grads) = eval_loss(params, forward, true)?;
    let (l2, _) = eval_loss(params, forward, false)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Contract(format!(
            "gradcheck: non-deterministic closure ({l1} vs {l2})"
        )));
    }
    Ok(grads)
}

/// Compare analytic gradients against central finite differences (step 1e-5).
///
/// For large parameter blocks, up to `max_coords_per_block` coordinates are
/// sampled (seeded, deterministic). Errors if the closure is detected to be
/// non-deterministic (two identical forward passes disagree).
pub fn check_gradients(
    params: &[(String, Tensor<f64>)],
    forward: ForwardFn,
    max_coords_per_block: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let grads = check_determinism(params, forward)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(params.len());
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();

    for (bi, (name, tensor)) in params.iter().enumerate() {
        let total = tensor.data.len();
        let mut coords: Vec<usize> = (0..total).collect();
        if total > max_coords_per_block {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords_per_block);
            coords.sort_unstable();
        }
        let mut max_rel = 0.0_f64;
        for &c in &coords {
            let rel = coord_rel_err(&mut work, forward, bi, c, grads[bi][c])?;
            max_rel = max_rel.max(rel);
        }
        blocks.push(BlockReport {
            name: name.clone(),
            max_rel_err: max_rel,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport { blocks })
}

/// Like `check_gradients`, but draws `total_coords` coordinates uniformly
/// over the whole parameter vector instead of a quota per block. Intended
/// for large models where a per-block quota costs too many evaluations;
/// distinct seeds sample distinct coordinates, so repeated runs cover the
/// space. Returns the worst relative error over the sample.
pub fn check_gradients_sampled(
    params: &[(String, Tensor<f64>)],
    forward: ForwardFn,
    total_coords: usize,
    seed: u64,
) -> Result<f64> {
    let grads = check_determinism(params, forward)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();

    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (bi, (_, tensor)) in params.iter().enumerate() {
        flat.extend((0..tensor.data.len()).map(|c| (bi, c)));
    }
    flat.shuffle(&mut rng);
    flat.truncate(total_coords);

    let mut max_rel = 0.0_f64;
    for (bi, c) in flat {
        let rel = coord_rel_err(&mut work, forward, bi, c, grads[bi][c])?;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Rebuild `RankerIds` from leaves registered in `named_params` order.
fn ranker_ids_from_refs(refs: &[TensorRef]) -> crate::ranker::RankerIds {
    use crate::ranker::{EmbedIds, GruIds, RankerIds, TowerIds};
    let cell = |o: usize| -> GruIds {
        [
            refs[o],
            refs[o + 1],
            refs[o + 2],
            refs[o + 3],
            refs[o + 4],
            refs[o + 5],
            refs[o + 6],
            refs[o + 7],
            refs[o + 8],
        ]
    };
    let n_tables = crate::featurizer::NUM_ATTRIBUTES;
    RankerIds {
        tower: TowerIds {
            fwd: cell(0),
            bwd: cell(9),
            proj_w: refs[18],
            proj_b: refs[19],
        },
        embed: EmbedIds {
            tables: refs[20..20 + n_tables].to_vec(),
            proj_w: refs[20 + n_tables],
            proj_b: refs[21 + n_tables],
        },
    }
}

/// Rebuild `MsdaeIds` from leaves registered in `named_params` order.
fn msdae_ids_from_refs(refs: &[TensorRef]) -> crate::msdae::MsdaeIds {
    use crate::msdae::{MsdaeIds, NUM_SOURCES};
    let six = |o: usize| [refs[o], refs[o + 1], refs[o + 2], refs[o + 3], refs[o + 4], refs[o + 5]];
    MsdaeIds {
        enc: (0..NUM_SOURCES).map(|s| six(s * 6)).collect(),
        fuse_w: refs[NUM_SOURCES * 6],
        fuse_b: refs[NUM_SOURCES * 6 + 1],
        dec: (0..NUM_SOURCES).map(|s| six(NUM_SOURCES * 6 + 2 + s * 6)).collect(),
    }
}

fn clone_named(params: Vec<(String, &Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    params.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

/// Gradient-check the whole model stack at one seed: a dense unit layer, a
/// GRU step, the autoencoder reconstruction loss, and the full energy model
/// under both ranking losses. Returns (check name, max relative error).
pub fn model_stack_report(seed: u64) -> Result<Vec<(String, f64)>> {
    use crate::featurizer::{MultiHotTriple, NUM_ATTRIBUTES};
    use crate::losses::{listwise_loss_on_tape, pairwise_loss_on_tape, PhiKind};
    use crate::msdae::{Msdae, FUSED_DIM, SOURCE_DIMS};
    use crate::ranker::{energy_batch, embed_info_state, gru_step, GruCellParams, GruIds, RankerParams, GRU_HIDDEN_DIM, GRU_INPUT_DIM};
    use crate::trainer::BnMode;
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // dense unit layer: x -> tanh(xW + b), sum-of-squares loss
    {
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = vec![
            ("w".to_string(), Tensor::new([4, 5], w)?),
            ("b".to_string(), Tensor::new([1, 5], b)?),
        ];
        let report = check_gradients(
            &params,
            &move |tape, refs| {
                let xt = tape.constant(Tensor::new([2, 4], x.clone())?);
                let h = tape.matmul(xt, refs[0])?;
                let h = tape.add_bias(h, refs[1])?;
                let h = tape.tanh(h);
                let sq = tape.mul(h, h)?;
                Ok(tape.sum(sq))
            },
            64,
            seed,
        )?;
        out.push(("unit.dense".to_string(), report.max_rel_err()));
    }

    // single GRU step
    {
        let cell = GruCellParams::<f64>::init(&mut rng)?;
        let x: Vec<f64> = (0..GRU_INPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..GRU_HIDDEN_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params: Vec<(String, Tensor<f64>)> = cell
            .fields()
            .iter()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect();
        let report = check_gradients(
            &params,
            &move |tape, refs| {
                let ids: GruIds = refs.try_into().expect("nine GRU blocks");
                let xt = tape.constant(Tensor::new([1, GRU_INPUT_DIM], x.clone())?);
                let ht = tape.constant(Tensor::new([1, GRU_HIDDEN_DIM], h.clone())?);
                let h1 = gru_step(tape, &ids, xt, ht)?;
                let sq = tape.mul(h1, h1)?;
                Ok(tape.sum(sq))
            },
            8,
            seed,
        )?;
        out.push(("gru.step".to_string(), report.max_rel_err()));
    }

    // autoencoder reconstruction loss on a two-triple batch
    {
        let msdae = Msdae::<f64>::init(&mut rng)?;
        let triple = |rng: &mut ChaCha8Rng| {
            let mut mk = |dim: usize| -> Vec<f32> {
                (0..dim).map(|_| if rng.gen_bool(0.03) { 1.0 } else { 0.0 }).collect()
            };
            MultiHotTriple {
                v_s: mk(SOURCE_DIMS[0]),
                v_t: mk(SOURCE_DIMS[1]),
                v_c: mk(SOURCE_DIMS[2]),
            }
        };
        let clean = vec![triple(&mut rng), triple(&mut rng)];
        let bn = msdae.bn_states.clone();
        let params = clone_named(msdae.named_params());
        let corrupted: Vec<[Vec<f32>; 3]> = clean
            .iter()
            .map(|t| [t.v_s.clone(), t.v_t.clone(), t.v_c.clone()])
            .collect();
        let worst = check_gradients_sampled(
            &params,
            &move |tape, refs| {
                let ids = msdae_ids_from_refs(refs);
                let refs_clean: Vec<&MultiHotTriple> = clean.iter().collect();
                let mut bn_work = bn.clone();
                crate::msdae::dae_loss_batch(
                    tape,
                    &ids,
                    &refs_clean,
                    &corrupted,
                    &mut bn_work,
                    BnMode::Train,
                )
            },
            30,
            seed,
        )?;
        out.push(("msdae.loss".to_string(), worst));
    }

    // full energy model: tower + info-state embedder under both losses
    let table_rows: Vec<usize> = (0..NUM_ATTRIBUTES).map(|_| 3).collect();
    let ranker = RankerParams::<f64>::init(&table_rows, &mut rng)?;
    let m = 3;
    let intents: Vec<f64> = (0..m * FUSED_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let state_idx: Vec<usize> = (0..NUM_ATTRIBUTES).map(|_| rng.gen_range(0..3)).collect();
    let relevance = [2u32, 1, 0];
    let pairs = crate::losses::ordered_pairs(&relevance);
    let perm = vec![0usize, 1, 2];
    let params = clone_named(ranker.named_params());

    for (name, listwise) in [("ebm.pairwise", false), ("ebm.listwise", true)] {
        let intents = intents.clone();
        let state_idx = state_idx.clone();
        let pairs = pairs.clone();
        let perm = perm.clone();
        let worst = check_gradients_sampled(
            &params,
            &move |tape, refs| {
                let ids = ranker_ids_from_refs(refs);
                let vi = tape.constant(Tensor::new([m, FUSED_DIM], intents.clone())?);
                let vs = embed_info_state(tape, &ids.embed, &[state_idx.clone()])?;
                let (_, score) = energy_batch(tape, &ids.tower, vi, vs, vec![0; m])?;
                if listwise {
                    listwise_loss_on_tape(tape, score, perm.clone())
                } else {
                    pairwise_loss_on_tape(tape, score, pairs.clone(), PhiKind::Logistic)
                }
            },
            30,
            seed,
        )?;
        out.push((name.to_string(), worst));
    }
    Ok(out)
}
