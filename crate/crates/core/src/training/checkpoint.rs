//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `ATMXCKPT`, `u32` version, `u64` metadata length, metadata JSON,
//! `u32` array count, then per array `u32` name length, name bytes, `u32` rank,
//! `u64` dims, `f64` values; finally the SHA-256 of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::data::{Vocabulary, VocabularyDigest};
use crate::model::{HyperParams, ModelParams};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATMXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub hyper: HyperParams,
    pub vocabulary_digest: VocabularyDigest,
    pub vocabulary: Vocabulary,
    /// Epoch the parameters come from (0 = initialization).
    pub epoch: usize,
    /// Validation MRR@20 at that epoch.
    pub validation_mrr: f64,
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(hyper: HyperParams, vocabulary: Vocabulary, params: ModelParams) -> Self {
        let meta = CheckpointMeta {
            hyper,
            vocabulary_digest: vocabulary.digest(),
            vocabulary,
            epoch: 0,
            validation_mrr: 0.0,
            seed: 0,
            config: serde_json::Value::Null,
        };
        Self { meta, params }
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.meta.hyper
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.meta.vocabulary
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let set = self.params.set();
        out.extend_from_slice(&(set.len() as u32).to_le_bytes());
        for (name, t) in set.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |m: &str| TrainError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("truncated"));
        }
        let (body, hash) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != hash {
            return Err(corrupt("content hash mismatch"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
        if meta.vocabulary.digest() != meta.vocabulary_digest {
            return Err(corrupt("vocabulary digest mismatch"));
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("array name"))?.to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("shape"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if set.get(&name).is_some() {
                return Err(corrupt("duplicate array"));
            }
            set.insert(name, Tensor::new(&shape, data).map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let params = ModelParams::from_set(meta.vocabulary.len(), &meta.hyper, set)
            .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
        Ok(Self { meta, params })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TrainError::CorruptCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};

    fn sample() -> Checkpoint {
        let hyper = HyperParams { dim: 8, levels: 2, heads: 2, ..HyperParams::default() };
        let vocab = Vocabulary::from_ordered((1..=5).map(|i| i.to_string()).collect(), vec![3; 5]);
        let params = init_params(5, &hyper, 4).unwrap();
        Checkpoint::new(hyper, vocab, params)
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hyper().dim, 8);
        let p = [1, 4, 2];
        assert_eq!(forward(&p, &back.params, back.hyper()).unwrap(), forward(&p, &c.params, c.hyper()).unwrap());
    }

    #[test]
    fn damage_detected() {
        let bytes = sample().to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(TrainError::CorruptCheckpoint(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(TrainError::CorruptCheckpoint(_))));
        let mut versioned = bytes;
        versioned[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&versioned),
            Err(TrainError::VersionMismatch { found: 9, .. })
        ));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
