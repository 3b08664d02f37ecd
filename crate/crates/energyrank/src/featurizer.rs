//! Converts raw intent candidates and information-states into the multi-hot
//! encodings consumed by the autoencoder and rankers.
//!
//! Layout: `v_s` is 11 one-hot blocks of 11 bins (binned model scores),
//! `v_t` and `v_c` are 20 blocks of 50 dims each (feature-hashed tokens and
//! slot labels, zero-padded past the token count). All functions here are
//! pure; hash salts are explicit so encodings are reproducible from
//! checkpoint metadata.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const NUM_SCORES: usize = 11;
pub const SCORE_BINS: usize = 11;
pub const MAX_TOKENS: usize = 20;
pub const TOKEN_BLOCK_DIM: usize = 50;
pub const HASHES_PER_TOKEN: usize = 3;
pub const NUM_ATTRIBUTES: usize = 114;

pub const V_S_DIM: usize = NUM_SCORES * SCORE_BINS; // 121
pub const V_T_DIM: usize = MAX_TOKENS * TOKEN_BLOCK_DIM; // 1000
pub const V_C_DIM: usize = MAX_TOKENS * TOKEN_BLOCK_DIM; // 1000

/// One hypothesis for a request.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IntentCandidate {
    pub scores: Vec<f64>,
    pub tokens: Vec<String>,
    pub slot_labels: Vec<String>,
    pub relevance: u32,
}

impl IntentCandidate {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != NUM_SCORES {
            return Err(Error::validation(format!(
                "intent must carry exactly {} scores, got {}",
                NUM_SCORES,
                self.scores.len()
            )));
        }
        if self.scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::validation("intent score outside [0,1]"));
        }
        if self.slot_labels.len() != self.tokens.len() {
            return Err(Error::validation(format!(
                "slot label count {} does not match token count {}",
                self.slot_labels.len(),
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

/// 114 categorical attribute values attached to a request. Keys are the
/// canonical attribute names (`attr_000` .. `attr_113`), fixed across a
/// dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InformationState {
    pub attributes: BTreeMap<String, String>,
}

impl InformationState {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.len() != NUM_ATTRIBUTES {
            return Err(Error::validation(format!(
                "information state must carry exactly {} attributes, got {}",
                NUM_ATTRIBUTES,
                self.attributes.len()
            )));
        }
        Ok(())
    }
}

pub fn attribute_name(i: usize) -> String {
    format!("attr_{i:03}")
}

/// The encoded (V^s, V^t, V^c) bit-vectors. Stored as 0.0/1.0 floats so they
/// feed the tensor engine directly.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHotTriple {
    pub v_s: Vec<f32>,
    pub v_t: Vec<f32>,
    pub v_c: Vec<f32>,
}

/// Hash salts for token and slot-label feature hashing. Recorded in
/// checkpoint metadata so encodings are reproducible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct FeaturizerSalts {
    pub token_salt: u64,
    pub slot_salt: u64,
}

impl Default for FeaturizerSalts {
    fn default() -> Self {
        FeaturizerSalts {
            token_salt: 0x5e0a_11ab_1e5a_17ed,
            slot_salt: 0xc0de_ba5e_d00d_f00d,
        }
    }
}

/// Bin a score in [0,1] into a one-hot vector; the top bin is clamped so
/// s = 1.0 lands in bin `n_bins - 1`.
pub fn bin_score(s: f64, n_bins: usize) -> Result<Vec<f32>> {
    if n_bins == 0 {
        return Err(Error::validation("bin_score: n_bins must be positive"));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::validation(format!("bin_score: {s} outside [0,1]")));
    }
    let idx = ((s * n_bins as f64).floor() as usize).min(n_bins - 1);
    let mut v = vec![0.0; n_bins];
    v[idx] = 1.0;
    Ok(v)
}

/// FNV-1a over salt and bytes; the seed index decorrelates the k hashes.
fn salted_hash(salt: u64, seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ salt.wrapping_mul(seed.wrapping_add(1));
    for &b in salt.to_le_bytes().iter().chain(seed.to_le_bytes().iter()).chain(bytes) {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Feature-hash a token into a `block_dim`-dimensional multi-hot vector by
/// setting `k` salted hash positions. Empty tokens (after lowercase/trim)
/// are padding and produce the zero vector.
pub fn hash_token(token: &str, block_dim: usize, k: usize, salt: u64) -> Vec<f32> {
    let norm = token.trim().to_lowercase();
    let mut v = vec![0.0; block_dim];
    if norm.is_empty() {
        return v;
    }
    for i in 0..k {
        let idx = (salted_hash(salt, i as u64, norm.as_bytes()) % block_dim as u64) as usize;
        v[idx] = 1.0;
    }
    v
}

/// Encode one intent into its (v_s, v_t, v_c) triple. Tokens past
/// `MAX_TOKENS` are trimmed; missing blocks stay zero.
pub fn encode_intent(intent: &IntentCandidate, salts: FeaturizerSalts) -> Result<MultiHotTriple> {
    intent.validate()?;
    let mut v_s = Vec::with_capacity(V_S_DIM);
    for &s in &intent.scores {
        v_s.extend(bin_score(s, SCORE_BINS)?);
    }
    let mut v_t = vec![0.0; V_T_DIM];
    let mut v_c = vec![0.0; V_C_DIM];
    for (i, (tok, slot)) in intent
        .tokens
        .iter()
        .zip(&intent.slot_labels)
        .take(MAX_TOKENS)
        .enumerate()
    {
        let tb = hash_token(tok, TOKEN_BLOCK_DIM, HASHES_PER_TOKEN, salts.token_salt);
        let cb = hash_token(slot, TOKEN_BLOCK_DIM, HASHES_PER_TOKEN, salts.slot_salt);
        v_t[i * TOKEN_BLOCK_DIM..(i + 1) * TOKEN_BLOCK_DIM].copy_from_slice(&tb);
        v_c[i * TOKEN_BLOCK_DIM..(i + 1) * TOKEN_BLOCK_DIM].copy_from_slice(&cb);
    }
    Ok(MultiHotTriple { v_s, v_t, v_c })
}

/// Per-attribute categorical vocabularies. Index 0 of every table is
/// reserved for unseen values; known values start at 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct AttrVocab {
    pub tables: Vec<BTreeMap<String, usize>>,
}

impl AttrVocab {
    /// Build vocabularies from a stream of information-states.
    pub fn build<'a>(states: impl IntoIterator<Item = &'a InformationState>) -> Self {
        let mut tables = vec![BTreeMap::new(); NUM_ATTRIBUTES];
        let mut pending: Vec<std::collections::BTreeSet<String>> =
            vec![Default::default(); NUM_ATTRIBUTES];
        for st in states {
            for i in 0..NUM_ATTRIBUTES {
                if let Some(v) = st.attributes.get(&attribute_name(i)) {
                    pending[i].insert(v.clone());
                }
            }
        }
        for (i, set) in pending.into_iter().enumerate() {
            for (j, v) in set.into_iter().enumerate() {
                tables[i].insert(v, j + 1);
            }
        }
        AttrVocab { tables }
    }

    /// Table size including the reserved unseen row.
    pub fn table_rows(&self, attr: usize) -> usize {
        self.tables[attr].len() + 1
    }
}

/// Map each categorical value to its index within the attribute table;
/// unseen values take the reserved index 0.
pub fn encode_info_state(state: &InformationState, vocab: &AttrVocab) -> Result<Vec<usize>> {
    state.validate()?;
    let mut out = Vec::with_capacity(NUM_ATTRIBUTES);
    for i in 0..NUM_ATTRIBUTES {
        let name = attribute_name(i);
        let value = state
            .attributes
            .get(&name)
            .ok_or_else(|| Error::validation(format!("missing attribute {name}")))?;
        out.push(vocab.tables[i].get(value).copied().unwrap_or(0));
    }
    Ok(out)
}
