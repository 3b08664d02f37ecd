//! Siamese energy-based ranker: twin bidirectional GRU towers with shared
//! weights map the fused intent representation and the embedded
//! information-state into a common metric space; the energy of a pair is the
//! (dimension-averaged) L1 distance between the mapped points and the
//! ranking score is sigmoid(-energy), so low energy means high score.

use crate::autodiff::{stable_sigmoid, Scalar, Tape, Tensor, TensorRef};
use crate::error::{Error, Result};
use crate::featurizer::NUM_ATTRIBUTES;
use crate::msdae::FUSED_DIM;
use crate::trainer::he_init;
use rand::Rng;

pub const GRU_INPUT_DIM: usize = 50;
pub const GRU_HIDDEN_DIM: usize = 64;
pub const FRAMES: usize = 10;
pub const METRIC_DIM: usize = 64;
pub const EMBED_DIM: usize = 16;
pub const EMBED_CONCAT_DIM: usize = NUM_ATTRIBUTES * EMBED_DIM; // 1824

/// Update gate, reset gate, and candidate weights of one GRU cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams<T> {
    pub wxz: Tensor<T>,
    pub whz: Tensor<T>,
    pub bz: Tensor<T>,
    pub wxr: Tensor<T>,
    pub whr: Tensor<T>,
    pub br: Tensor<T>,
    pub wxh: Tensor<T>,
    pub whh: Tensor<T>,
    pub bh: Tensor<T>,
}

impl<T: Scalar> GruCellParams<T> {
    pub fn init<R: Rng>(rng: &mut R) -> Result<Self> {
        Ok(GruCellParams {
            wxz: he_init([GRU_INPUT_DIM, GRU_HIDDEN_DIM], GRU_INPUT_DIM, rng)?,
            whz: he_init([GRU_HIDDEN_DIM, GRU_HIDDEN_DIM], GRU_HIDDEN_DIM, rng)?,
            bz: Tensor::zeros([1, GRU_HIDDEN_DIM]),
            wxr: he_init([GRU_INPUT_DIM, GRU_HIDDEN_DIM], GRU_INPUT_DIM, rng)?,
            whr: he_init([GRU_HIDDEN_DIM, GRU_HIDDEN_DIM], GRU_HIDDEN_DIM, rng)?,
            br: Tensor::zeros([1, GRU_HIDDEN_DIM]),
            wxh: he_init([GRU_INPUT_DIM, GRU_HIDDEN_DIM], GRU_INPUT_DIM, rng)?,
            whh: he_init([GRU_HIDDEN_DIM, GRU_HIDDEN_DIM], GRU_HIDDEN_DIM, rng)?,
            bh: Tensor::zeros([1, GRU_HIDDEN_DIM]),
        })
    }

    pub fn zeros() -> Self {
        GruCellParams {
            wxz: Tensor::zeros([GRU_INPUT_DIM, GRU_HIDDEN_DIM]),
            whz: Tensor::zeros([GRU_HIDDEN_DIM, GRU_HIDDEN_DIM]),
            bz: Tensor::zeros([1, GRU_HIDDEN_DIM]),
            wxr: Tensor::zeros([GRU_INPUT_DIM, GRU_HIDDEN_DIM]),
            whr: Tensor::zeros([GRU_HIDDEN_DIM, GRU_HIDDEN_DIM]),
            br: Tensor::zeros([1, GRU_HIDDEN_DIM]),
            wxh: Tensor::zeros([GRU_INPUT_DIM, GRU_HIDDEN_DIM]),
            whh: Tensor::zeros([GRU_HIDDEN_DIM, GRU_HIDDEN_DIM]),
            bh: Tensor::zeros([1, GRU_HIDDEN_DIM]),
        }
    }

    pub(crate) fn fields(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("wxz", &self.wxz),
            ("whz", &self.whz),
            ("bz", &self.bz),
            ("wxr", &self.wxr),
            ("whr", &self.whr),
            ("br", &self.br),
            ("wxh", &self.wxh),
            ("whh", &self.whh),
            ("bh", &self.bh),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.wxz,
            &mut self.whz,
            &mut self.bz,
            &mut self.wxr,
            &mut self.whr,
            &mut self.br,
            &mut self.wxh,
            &mut self.whh,
            &mut self.bh,
        ]
    }
}

pub type GruIds = [TensorRef; 9];

/// One shared bidirectional GRU tower plus the projection into the metric
/// space. The same parameter set serves both tower inputs — weight sharing
/// is by construction, not by copying.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseTowerParams<T> {
    pub fwd: GruCellParams<T>,
    pub bwd: GruCellParams<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

impl<T: Scalar> SiameseTowerParams<T> {
    pub fn init<R: Rng>(rng: &mut R) -> Result<Self> {
        Ok(SiameseTowerParams {
            fwd: GruCellParams::init(rng)?,
            bwd: GruCellParams::init(rng)?,
            proj_w: he_init([2 * GRU_HIDDEN_DIM, METRIC_DIM], 2 * GRU_HIDDEN_DIM, rng)?,
            proj_b: Tensor::zeros([1, METRIC_DIM]),
        })
    }
}

pub struct TowerIds {
    pub fwd: GruIds,
    pub bwd: GruIds,
    pub proj_w: TensorRef,
    pub proj_b: TensorRef,
}

/// Per-attribute embedding tables (row 0 reserved for unseen values) and
/// the projection to the shared 500-dim input space.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoStateEmbedderParams<T> {
    pub tables: Vec<Tensor<T>>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

impl<T: Scalar> InfoStateEmbedderParams<T> {
    /// `table_rows[i]` counts rows of attribute i's table including the
    /// reserved unseen row.
    pub fn init<R: Rng>(table_rows: &[usize], rng: &mut R) -> Result<Self> {
        if table_rows.len() != NUM_ATTRIBUTES {
            return Err(Error::validation(format!(
                "embedder: expected {} attribute tables, got {}",
                NUM_ATTRIBUTES,
                table_rows.len()
            )));
        }
        let mut tables = Vec::with_capacity(NUM_ATTRIBUTES);
        for &rows in table_rows {
            tables.push(he_init([rows.max(1), EMBED_DIM], EMBED_DIM, rng)?);
        }
        Ok(InfoStateEmbedderParams {
            tables,
            proj_w: he_init([EMBED_CONCAT_DIM, FUSED_DIM], EMBED_CONCAT_DIM, rng)?,
            proj_b: Tensor::zeros([1, FUSED_DIM]),
        })
    }
}

pub struct EmbedIds {
    pub tables: Vec<TensorRef>,
    pub proj_w: TensorRef,
    pub proj_b: TensorRef,
}

/// The full ranking model: shared tower plus information-state embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams<T> {
    pub tower: SiameseTowerParams<T>,
    pub embed: InfoStateEmbedderParams<T>,
}

pub struct RankerIds {
    pub tower: TowerIds,
    pub embed: EmbedIds,
}

impl<T: Scalar> RankerParams<T> {
    pub fn init<R: Rng>(table_rows: &[usize], rng: &mut R) -> Result<Self> {
        Ok(RankerParams {
            tower: SiameseTowerParams::init(rng)?,
            embed: InfoStateEmbedderParams::init(table_rows, rng)?,
        })
    }

    /// Canonical (name, tensor) order shared by `bind`, Adam, and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (dir, cell) in [("fwd", &self.tower.fwd), ("bwd", &self.tower.bwd)] {
            for (fname, t) in cell.fields() {
                out.push((format!("tower.{dir}.{fname}"), t));
            }
        }
        out.push(("tower.proj.w".to_string(), &self.tower.proj_w));
        out.push(("tower.proj.b".to_string(), &self.tower.proj_b));
        for (i, t) in self.embed.tables.iter().enumerate() {
            out.push((format!("embed.attr{i:03}"), t));
        }
        out.push(("embed.proj.w".to_string(), &self.embed.proj_w));
        out.push(("embed.proj.b".to_string(), &self.embed.proj_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for cell in [&mut self.tower.fwd, &mut self.tower.bwd] {
            out.extend(cell.fields_mut());
        }
        out.push(&mut self.tower.proj_w);
        out.push(&mut self.tower.proj_b);
        for t in self.embed.tables.iter_mut() {
            out.push(t);
        }
        out.push(&mut self.embed.proj_w);
        out.push(&mut self.embed.proj_b);
        out
    }

    pub fn convert<U: Scalar>(&self) -> RankerParams<U> {
        let conv = |t: &Tensor<T>| Tensor::<U> {
            shape: t.shape,
            data: t.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        };
        let cell = |c: &GruCellParams<T>| GruCellParams {
            wxz: conv(&c.wxz),
            whz: conv(&c.whz),
            bz: conv(&c.bz),
            wxr: conv(&c.wxr),
            whr: conv(&c.whr),
            br: conv(&c.br),
            wxh: conv(&c.wxh),
            whh: conv(&c.whh),
            bh: conv(&c.bh),
        };
        RankerParams {
            tower: SiameseTowerParams {
                fwd: cell(&self.tower.fwd),
                bwd: cell(&self.tower.bwd),
                proj_w: conv(&self.tower.proj_w),
                proj_b: conv(&self.tower.proj_b),
            },
            embed: InfoStateEmbedderParams {
                tables: self.embed.tables.iter().map(conv).collect(),
                proj_w: conv(&self.embed.proj_w),
                proj_b: conv(&self.embed.proj_b),
            },
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> RankerIds {
        let refs: Vec<TensorRef> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        let mut it = refs.into_iter();
        let cell = |it: &mut dyn Iterator<Item = TensorRef>| -> GruIds {
            [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ]
        };
        let fwd = cell(&mut it);
        let bwd = cell(&mut it);
        let proj_w = it.next().unwrap();
        let proj_b = it.next().unwrap();
        let tables: Vec<TensorRef> = (0..NUM_ATTRIBUTES).map(|_| it.next().unwrap()).collect();
        let eproj_w = it.next().unwrap();
        let eproj_b = it.next().unwrap();
        RankerIds {
            tower: TowerIds {
                fwd,
                bwd,
                proj_w,
                proj_b,
            },
            embed: EmbedIds {
                tables,
                proj_w: eproj_w,
                proj_b: eproj_b,
            },
        }
    }
}

/// One GRU step on a batch: z and r gates, candidate state, convex update
/// h' = (1-z) o h + z o h~.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &GruIds,
    x: TensorRef,
    h: TensorRef,
) -> Result<TensorRef> {
    let [wxz, whz, bz, wxr, whr, br, wxh, whh, bh] = *ids;
    let sx = tape.shape(x);
    let sh = tape.shape(h);
    if sx[1] != GRU_INPUT_DIM || sh[1] != GRU_HIDDEN_DIM || sx[0] != sh[0] {
        return Err(Error::shape("gru_step", &sx, &sh));
    }
    let xz = tape.matmul(x, wxz)?;
    let hz = tape.matmul(h, whz)?;
    let z_pre = tape.add(xz, hz)?;
    let z_pre = tape.add_bias(z_pre, bz)?;
    let z = tape.sigmoid(z_pre);

    let xr = tape.matmul(x, wxr)?;
    let hr = tape.matmul(h, whr)?;
    let r_pre = tape.add(xr, hr)?;
    let r_pre = tape.add_bias(r_pre, br)?;
    let r = tape.sigmoid(r_pre);

    let rh = tape.mul(r, h)?;
    let xc = tape.matmul(x, wxh)?;
    let hc = tape.matmul(rh, whh)?;
    let c_pre = tape.add(xc, hc)?;
    let c_pre = tape.add_bias(c_pre, bh)?;
    let cand = tape.tanh(c_pre);

    let one_minus_z = tape.affine(z, -T::one(), T::one());
    let keep = tape.mul(one_minus_z, h)?;
    let take = tape.mul(z, cand)?;
    tape.add(keep, take)
}

/// Final hidden states of the forward and backward passes over the 10-frame
/// view of a `[m, 500]` input.
pub fn tower_passes<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &TowerIds,
    v: TensorRef,
) -> Result<(TensorRef, TensorRef)> {
    let s = tape.shape(v);
    if s[1] != FUSED_DIM {
        return Err(Error::shape("tower_forward", &s, &[s[0], FUSED_DIM]));
    }
    let m = s[0];
    let mut frames = Vec::with_capacity(FRAMES);
    for t in 0..FRAMES {
        frames.push(tape.slice_cols(v, t * GRU_INPUT_DIM, GRU_INPUT_DIM)?);
    }
    let mut h_f = tape.constant(Tensor::zeros([m, GRU_HIDDEN_DIM]));
    for &f in &frames {
        h_f = gru_step(tape, &ids.fwd, f, h_f)?;
    }
    let mut h_b = tape.constant(Tensor::zeros([m, GRU_HIDDEN_DIM]));
    for &f in frames.iter().rev() {
        h_b = gru_step(tape, &ids.bwd, f, h_b)?;
    }
    Ok((h_f, h_b))
}

/// Map a `[m, 500]` batch into the metric space: bidirectional GRU over 10
/// frames of 50 dims, concat of the two final states, linear projection.
pub fn tower_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &TowerIds,
    v: TensorRef,
) -> Result<TensorRef> {
    let (h_f, h_b) = tower_passes(tape, ids, v)?;
    let cat = tape.concat_cols(&[h_f, h_b])?;
    let p = tape.matmul(cat, ids.proj_w)?;
    tape.add_bias(p, ids.proj_b)
}

/// Look up the 114 attribute embeddings for a batch of index vectors,
/// concatenate, and project to the 500-dim shared space.
pub fn embed_info_state<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &EmbedIds,
    indices: &[Vec<usize>],
) -> Result<TensorRef> {
    if indices.is_empty() {
        return Err(Error::validation("embed_info_state: empty batch"));
    }
    let mut parts = Vec::with_capacity(NUM_ATTRIBUTES);
    for (a, &table) in ids.tables.iter().enumerate() {
        let rows = tape.shape(table)[0];
        let mut col = Vec::with_capacity(indices.len());
        for idx in indices {
            if idx.len() != NUM_ATTRIBUTES {
                return Err(Error::validation(format!(
                    "embed_info_state: expected {} indices, got {}",
                    NUM_ATTRIBUTES,
                    idx.len()
                )));
            }
            if idx[a] >= rows {
                return Err(Error::validation(format!(
                    "embed_info_state: index {} out of range for attribute {} ({} rows)",
                    idx[a], a, rows
                )));
            }
            col.push(idx[a]);
        }
        parts.push(tape.gather_rows(table, col)?);
    }
    let cat = tape.concat_cols(&parts)?;
    let p = tape.matmul(cat, ids.proj_w)?;
    tape.add_bias(p, ids.proj_b)
}

/// Compatibility of an intent/state pair: energy is the per-dimension mean
/// L1 distance between the mapped points, score is sigmoid(-energy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyScore {
    pub energy: f64,
    pub score: f64,
}

impl EnergyScore {
    pub fn from_energy(energy: f64) -> Self {
        EnergyScore {
            energy,
            score: stable_sigmoid(-energy),
        }
    }
}

/// Batched intent-vs-state energies: `map[i]` names the state row paired
/// with intent row i. Returns (energy `[m,1]`, score `[m,1]`).
pub fn energy_batch<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &TowerIds,
    intent_reps: TensorRef,
    state_reps: TensorRef,
    map: Vec<usize>,
) -> Result<(TensorRef, TensorRef)> {
    let fi = tower_forward(tape, ids, intent_reps)?;
    let fs = tower_forward(tape, ids, state_reps)?;
    let raw = tape.l1_rows(fi, fs, map)?;
    // per-dimension mean keeps the energy O(1) so sigmoid(-E) stays away
    // from saturation; scaling by a constant preserves the metric axioms
    let e = tape.affine(raw, T::from_f64(1.0 / METRIC_DIM as f64), T::zero());
    let ne = tape.neg(e);
    let score = tape.sigmoid(ne);
    Ok((e, score))
}

/// Energy and score of a single intent/state pair with frozen parameters.
pub fn energy<T: Scalar>(
    params: &RankerParams<T>,
    x_int: &[T],
    x_st: &[T],
) -> Result<EnergyScore> {
    if x_int.len() != FUSED_DIM || x_st.len() != FUSED_DIM {
        return Err(Error::shape("energy", &[1, x_int.len()], &[1, x_st.len()]));
    }
    let mut tape = Tape::<T>::new();
    let ids = params.bind(&mut tape, false);
    let vi = tape.constant(Tensor::new([1, FUSED_DIM], x_int.to_vec())?);
    let vs = tape.constant(Tensor::new([1, FUSED_DIM], x_st.to_vec())?);
    let (e, _) = energy_batch(&mut tape, &ids.tower, vi, vs, vec![0])?;
    Ok(EnergyScore::from_energy(tape.value(e).data[0].to_f64()))
}

/// Score every intent of one request against its state and return the
/// candidate indices in descending score order (ties keep original order).
pub fn rank_request<T: Scalar>(
    params: &RankerParams<T>,
    intent_reps: &[Vec<T>],
    x_st: &[T],
) -> Result<Vec<(usize, f64)>> {
    if intent_reps.is_empty() {
        return Err(Error::validation("rank_request: no intents"));
    }
    let m = intent_reps.len();
    let mut tape = Tape::<T>::new();
    let ids = params.bind(&mut tape, false);
    let mut data = Vec::with_capacity(m * FUSED_DIM);
    for r in intent_reps {
        if r.len() != FUSED_DIM {
            return Err(Error::shape("rank_request", &[1, r.len()], &[1, FUSED_DIM]));
        }
        data.extend_from_slice(r);
    }
    let vi = tape.constant(Tensor::new([m, FUSED_DIM], data)?);
    let vs = tape.constant(Tensor::new([1, FUSED_DIM], x_st.to_vec())?);
    let (_, score) = energy_batch(&mut tape, &ids.tower, vi, vs, vec![0; m])?;
    let scores: Vec<f64> = tape.value(score).data.iter().map(|&x| x.to_f64()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    Ok(order.into_iter().map(|i| (i, scores[i])).collect())
}
