//! Binary checkpoint persistence. Layout: 5-byte magic, length-prefixed
//! metadata JSON, then named parameter blocks as little-endian f32 payloads.
//! Loading and re-saving a checkpoint reproduces the file byte for byte.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::featurizer::FeaturizerSalts;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"ERNK1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// Which pipeline stage this checkpoint belongs to ("msdae", "ranker",
    /// "baseline").
    pub kind: String,
    pub salts: FeaturizerSalts,
    pub config_hash: u64,
    pub seed: u64,
    pub epoch: u32,
    pub metrics: BTreeMap<String, f64>,
    /// Attribute value vocabularies (value -> embedding row), one map per
    /// attribute; empty for checkpoints that don't embed the info-state.
    pub vocab: Vec<BTreeMap<String, usize>>,
    /// Batch-norm running (mean, var) pairs, kept at full precision.
    #[serde(default)]
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn from_named<T: Scalar>(meta: CheckpointMeta, named: &[(String, &Tensor<T>)]) -> Self {
        let blocks = named
            .iter()
            .map(|(name, t)| Block {
                name: name.clone(),
                shape: t.shape,
                data: t.data.iter().map(|&x| x.to_f64() as f32).collect(),
            })
            .collect();
        Checkpoint { meta, blocks }
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing block {name}")))
    }

    /// Copy blocks into tensors in the given named order; shapes must match.
    pub fn restore<T: Scalar>(&self, names: &[String], targets: &mut [&mut Tensor<T>]) -> Result<()> {
        if names.len() != targets.len() {
            return Err(Error::validation("restore: name/target length mismatch"));
        }
        for (name, target) in names.iter().zip(targets.iter_mut()) {
            let b = self.block(name)?;
            if b.shape != target.shape {
                return Err(Error::Format(format!(
                    "block {name}: shape {:?} in file, {:?} expected",
                    b.shape, target.shape
                )));
            }
            for (dst, &src) in target.data.iter_mut().zip(&b.data) {
                *dst = T::from_f64(src as f64);
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            if b.data.len() != b.shape[0] * b.shape[1] {
                return Err(Error::validation(format!(
                    "block {}: {} values for shape {:?}",
                    b.name,
                    b.data.len(),
                    b.shape
                )));
            }
            w.write_all(&(b.name.len() as u32).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&(b.shape[0] as u32).to_le_bytes())?;
            w.write_all(&(b.shape[1] as u32).to_le_bytes())?;
            for &x in &b.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                magic, MAGIC
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta_buf).map_err(|e| Error::Format(e.to_string()))?;
        let n_blocks = read_u32(&mut r)? as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Format(format!("block name: {e}")))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = vec![0f32; rows * cols];
            let mut buf = [0u8; 4];
            for x in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *x = f32::from_le_bytes(buf);
            }
            blocks.push(Block {
                name,
                shape: [rows, cols],
                data,
            });
        }
        Ok(Checkpoint { meta, blocks })
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(std::fs::File::open(path)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Order-insensitive hash for configuration fingerprints stored in
/// checkpoints and compared at evaluation time.
pub fn config_hash(serialized: &str) -> u64 {
    // FNV-1a over the canonical serialized form
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in serialized.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                kind: "ranker".into(),
                salts: FeaturizerSalts::default(),
                config_hash: 42,
                seed: 7,
                epoch: 12,
                metrics: BTreeMap::from([("validation_error".to_string(), 0.25)]),
                vocab: vec![BTreeMap::from([("music".to_string(), 1usize)])],
                bn_stats: vec![(vec![0.25], vec![1.5])],
            },
            blocks: vec![
                Block {
                    name: "tower.proj.w".into(),
                    shape: [2, 3],
                    data: vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 1e30],
                },
                Block {
                    name: "embed.proj.b".into(),
                    shape: [1, 2],
                    data: vec![0.5, -0.5],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.save(&mut bytes).unwrap();
        let loaded = Checkpoint::load(bytes.as_slice()).unwrap();
        assert_eq!(loaded, ck);
        let mut bytes2 = Vec::new();
        loaded.save(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Vec::new();
        sample().save(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::load(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let mut bytes = Vec::new();
        sample().save(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::load(bytes.as_slice()).is_err());
    }

    #[test]
    fn restore_checks_shapes() {
        let ck = sample();
        let mut t = Tensor::<f64>::zeros([2, 3]);
        let names = vec!["tower.proj.w".to_string()];
        ck.restore(&names, &mut [&mut t]).unwrap();
        assert_eq!(t.data[1], -2.5);
        let mut wrong = Tensor::<f64>::zeros([3, 2]);
        assert!(ck.restore(&names, &mut [&mut wrong]).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
    }
}
