//! Versioned checkpoint container: configs, RNG state, training progress
//! and every named tensor, CRC-32 protected. Encoding is canonical, so a
//! decoded checkpoint re-encodes to identical bytes.

use std::path::Path;

use fofa_core::model::{Model, ModelConfig, ParamStore};
use fofa_core::train::TrainConfig;
use fofa_core::RngState;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::{expect_magic, put_tensor, read_tensor, verified_body, Reader};

pub const MAGIC: [u8; 4] = *b"FOFC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub rng: RngState,
    pub step: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.cfg.clone(),
            train: self.train.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in [
            self.rng.seed(),
            self.rng.stream(),
            self.rng.counter(),
            self.step,
            self.epoch,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verified_body(bytes, 4 + 2 + 4 + 4)?;
        let mut r = Reader::new(body);
        expect_magic(&mut r, MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        header.model.validate()?;
        header.train.validate()?;
        let (seed, stream, counter) = (r.u64()?, r.u64()?, r.u64()?);
        let (step, epoch) = (r.u64()?, r.u64()?);
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Malformed(format!("tensor name: {e}")))?;
            params.insert(name, read_tensor(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!(
                "{} trailing checkpoint bytes",
                r.remaining()
            )));
        }
        check_layout(&header.model, &params)?;
        Ok(Self {
            model: Model {
                cfg: header.model,
                params,
            },
            train: header.train,
            rng: RngState::restore(seed, stream, counter),
            step,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Names, order and shapes must be those a fresh model of `cfg` has.
fn check_layout(cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    let fresh = Model::init(cfg.clone(), 0)?;
    let want: Vec<(&str, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if want != got {
        let first = want
            .iter()
            .zip(&got)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), got.len()));
        return Err(Error::Config(format!(
            "checkpoint does not match its config: {first}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fofa_core::backbone::{BackboneConfig, Family};
    use fofa_core::model::Mode;

    fn checkpoint(mode: Mode) -> Checkpoint {
        let mut bb = BackboneConfig::attention(12);
        bb.n_blocks = 2;
        bb.d = 4;
        bb.max_seq_len = 6;
        Checkpoint {
            model: Model::init(ModelConfig::new(bb, mode), 3).unwrap(),
            train: TrainConfig::for_family(Family::Attention),
            rng: RngState::restore(3, 1, 17),
            step: 40,
            epoch: 2,
        }
    }

    #[test]
    fn re_encoding_is_byte_identical() {
        for mode in [Mode::ForwardOfa, Mode::DeviceRec] {
            let bytes = checkpoint(mode).to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, checkpoint(mode));
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let mut bytes = checkpoint(Mode::DeviceRec).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x80;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));

        let mut ck = checkpoint(Mode::DeviceRec);
        ck.model.cfg.mode = Mode::ControllerOnly;
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Config(_))
        ));
    }
}
