//! Binary weight files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   b"AHAN"
//! version u32                  (= 1)
//! digest  [u8; 32]             SHA-256 of the model config JSON
//! count   u32
//! count × {
//!     name_len u32, name [u8; name_len] (UTF-8),
//!     rank u32, dims [u64; rank],
//!     values [f64; product(dims)]
//! }
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::AhanConfig;
use crate::error::{AhanError, Result};
use crate::model::AhanWeights;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AHAN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_weights(weights: &AhanWeights<Tensor>, cfg: &AhanConfig) -> Self {
        let mut tensors = Vec::new();
        weights.visit("", &mut |name, t| tensors.push((name, t.clone())));
        Checkpoint {
            digest: cfg.digest(),
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version} (expected {VERSION})"));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("tensor name: {e}"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("tensor `{name}`: dims {dims:?} overflow"))?;
            if n > r.remaining() / 8 {
                return Err(format!("tensor `{name}` truncated"));
            }
            let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Checkpoint { digest, tensors })
    }

    /// Weights for `cfg`; names, order and shapes must match the model
    /// layout and the stored digest must match `cfg`.
    pub fn into_weights(self, cfg: &AhanConfig) -> Result<AhanWeights<Tensor>> {
        if self.digest != cfg.digest() {
            return Err(AhanError::config(
                "checkpoint",
                "config digest differs from the one the checkpoint was saved with",
            ));
        }
        let classes = self
            .tensors
            .iter()
            .find(|(n, _)| n == "arc")
            .map(|(_, t)| t.cols())
            .ok_or_else(|| AhanError::invalid("checkpoint", "missing tensor `arc`"))?;
        let template = AhanWeights::init(cfg, classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut slots = Vec::new();
        template.visit("", &mut |name, t| slots.push((name, t.shape().to_vec())));
        if slots.len() != self.tensors.len() {
            return Err(AhanError::invalid(
                "checkpoint",
                format!("{} tensors, model has {}", self.tensors.len(), slots.len()),
            ));
        }
        for ((want, shape), (got, t)) in slots.iter().zip(&self.tensors) {
            if want != got || shape.as_slice() != t.shape() {
                return Err(AhanError::invalid(
                    "checkpoint",
                    format!("expected `{want}` {shape:?}, found `{got}` {:?}", t.shape()),
                ));
            }
        }
        template.rebuild(self.tensors.into_iter().map(|(_, t)| t).collect())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if n > self.remaining() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, weights: &AhanWeights<Tensor>, cfg: &AhanConfig) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, Checkpoint::from_weights(weights, cfg).encode()).map_err(|e| AhanError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &AhanConfig) -> Result<AhanWeights<Tensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| AhanError::io(path, e))?;
    Checkpoint::decode(&bytes)
        .map_err(|d| AhanError::format(path, d))?
        .into_weights(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn weights(cfg: &AhanConfig) -> AhanWeights<Tensor> {
        AhanWeights::init(cfg, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = RunConfig::desk().model;
        let mut w = weights(&cfg);
        // values whose bit patterns a lossy path would disturb
        w.arc.data_mut()[0] = -0.0;
        w.arc.data_mut()[1] = f64::MIN_POSITIVE / 4.0;
        w.arc.data_mut()[2] = 1.0 + f64::EPSILON;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&path, &w, &cfg).unwrap();
        let back = load_checkpoint(&path, &cfg).unwrap();
        for (a, b) in w.flatten().iter().zip(back.flatten()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(a.shape(), b.shape());
            assert_eq!(bits(a), bits(&b));
        }
    }

    #[test]
    fn header_layout() {
        let cfg = RunConfig::desk().model;
        let bytes = Checkpoint::from_weights(&weights(&cfg), &cfg).encode();
        assert_eq!(&bytes[0..4], b"AHAN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(&bytes[8..40], &cfg.digest());
        let mut n = 0;
        weights(&cfg).visit("", &mut |_, _| n += 1);
        assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), n);
        let name_len = u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize;
        assert_eq!(&bytes[48..48 + name_len], b"embed.projection");
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = RunConfig::desk().model;
        let bytes = Checkpoint::from_weights(&weights(&cfg), &cfg).encode();
        let mut other = cfg.clone();
        other.loss.lambda = 0.2;
        let err = Checkpoint::decode(&bytes).unwrap().into_weights(&other).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = RunConfig::desk().model;
        let bytes = Checkpoint::from_weights(&weights(&cfg), &cfg).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::decode(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(Checkpoint::decode(&bad_version).unwrap_err().contains("version"));
    }
}
