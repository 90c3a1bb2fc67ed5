//! Byte codecs for the uplink request, the assembled model and the
//! candidate-embedding payload. Little-endian, 32-bit floats, no
//! compression.
//!
//! Model frame: `"FOFA"`, u16 version, u16 `L`, an `L`-bit kept bitmap
//! (block `l` is bit `l % 8` of byte `l / 8`), then per kept block a u16
//! tensor count and per tensor a u8 rank, u32 extents and the data, then a
//! CRC-32 of everything before it. The checksum is verified before any
//! field is interpreted.

use fofa_core::assembly::{
    AssembledModel, DeviceRequest, CHECKSUM_LEN, MODEL_HEADER_LEN, REQUEST_HEADER_LEN,
};
use fofa_core::backbone::GateIndicator;
use fofa_core::controller::StructureLogits;
use fofa_core::mapper::LatentInterest;
use fofa_core::Tensor;

use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"FOFA";
pub const REQUEST_MAGIC: [u8; 4] = *b"FOFR";
pub const MODEL_VERSION: u16 = 1;

/// Gate plus kept-block tensors, as carried on the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPayload {
    pub gate: GateIndicator,
    pub blocks: Vec<(usize, Vec<Tensor>)>,
}

impl From<&AssembledModel> for ModelPayload {
    fn from(m: &AssembledModel) -> Self {
        Self {
            gate: m.gate.clone(),
            blocks: m.blocks.clone(),
        }
    }
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated {
                offset: self.pos,
                needed: n.saturating_sub(self.buf.len() - self.pos),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Malformed("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes one tensor: rank, extents, data.
pub(crate) fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    put_f32s(out, t.data());
}

pub(crate) fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Malformed("tensor size overflows".into()))?;
    if n * 4 > r.remaining() {
        return Err(Error::Truncated {
            offset: r.position(),
            needed: n * 4 - r.remaining(),
        });
    }
    Ok(Tensor::new(&shape, r.f32s(n)?)?)
}

pub fn serialize_model(m: &ModelPayload) -> Vec<u8> {
    let l = m.gate.len();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(l as u16).to_le_bytes());
    let mut bitmap = vec![0u8; l.div_ceil(8)];
    for k in m.gate.kept() {
        bitmap[k / 8] |= 1 << (k % 8);
    }
    out.extend_from_slice(&bitmap);
    for (_, tensors) in &m.blocks {
        out.extend_from_slice(&(tensors.len() as u16).to_le_bytes());
        for t in tensors {
            put_tensor(&mut out, t);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Splits off and verifies the trailing CRC-32.
pub(crate) fn verified_body(bytes: &[u8], min_len: usize) -> Result<&[u8]> {
    if bytes.len() < min_len {
        return Err(Error::Truncated {
            offset: bytes.len(),
            needed: min_len - bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

pub(crate) fn expect_magic(r: &mut Reader<'_>, magic: [u8; 4]) -> Result<()> {
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found: found.to_vec(),
        });
    }
    Ok(())
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ModelPayload> {
    let body = verified_body(bytes, MODEL_HEADER_LEN + CHECKSUM_LEN)?;
    let mut r = Reader::new(body);
    expect_magic(&mut r, MODEL_MAGIC)?;
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let l = r.u16()? as usize;
    let bitmap = r.take(l.div_ceil(8))?;
    let exec: Vec<bool> = (0..l).map(|k| bitmap[k / 8] >> (k % 8) & 1 == 1).collect();
    if l % 8 != 0 && bitmap[l / 8] >> (l % 8) != 0 {
        return Err(Error::Malformed("bitmap padding bits are set".into()));
    }
    let gate = GateIndicator::from_execute(exec);
    let mut blocks = Vec::with_capacity(gate.executed_count());
    for k in gate.kept() {
        let count = r.u16()? as usize;
        let tensors = (0..count)
            .map(|_| read_tensor(&mut r))
            .collect::<Result<Vec<_>>>()?;
        blocks.push((k, tensors));
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last block",
            r.remaining()
        )));
    }
    Ok(ModelPayload { gate, blocks })
}

pub fn encode_request(req: &DeviceRequest) -> Vec<u8> {
    let mut out = Vec::with_capacity(req.wire_len());
    out.extend_from_slice(&REQUEST_MAGIC);
    out.extend_from_slice(&req.version.to_le_bytes());
    out.extend_from_slice(&req.device_id.to_le_bytes());
    out.extend_from_slice(&(req.beta.n_blocks() as u16).to_le_bytes());
    out.extend_from_slice(&(req.h.h.numel() as u16).to_le_bytes());
    put_f32s(&mut out, req.beta.beta().data());
    put_f32s(&mut out, req.h.h.data());
    out
}

/// Header fields of a request, readable without decoding the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RequestHeader {
    pub version: u16,
    pub device_id: u64,
    pub n_blocks: usize,
    pub d_m: usize,
}

pub fn read_request_header(bytes: &[u8]) -> Result<RequestHeader> {
    let mut r = Reader::new(bytes);
    expect_magic(&mut r, REQUEST_MAGIC)?;
    Ok(RequestHeader {
        version: r.u16()?,
        device_id: r.u64()?,
        n_blocks: r.u16()? as usize,
        d_m: r.u16()? as usize,
    })
}

pub fn decode_request(bytes: &[u8]) -> Result<DeviceRequest> {
    let h = read_request_header(bytes)?;
    let mut r = Reader::new(&bytes[REQUEST_HEADER_LEN..]);
    let beta = r.f32s(2 * h.n_blocks)?;
    let latent = r.f32s(h.d_m)?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} bytes past the fixed-size request",
            r.remaining()
        )));
    }
    Ok(DeviceRequest {
        device_id: h.device_id,
        version: h.version,
        beta: StructureLogits::new(Tensor::new(&[h.n_blocks, 2], beta)?)?,
        h: LatentInterest {
            h: Tensor::vector(latent),
        },
    })
}

/// `(item id, embedding)` rows.
pub fn encode_candidates(rows: &[(usize, Vec<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    for (id, e) in rows {
        out.extend_from_slice(&(*id as u32).to_le_bytes());
        put_f32s(&mut out, e);
    }
    out
}

pub fn decode_candidates(bytes: &[u8], d: usize) -> Result<Vec<(usize, Vec<f32>)>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let rows = (0..n)
        .map(|_| Ok((r.u32()? as usize, r.f32s(d)?)))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing candidate bytes",
            r.remaining()
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fofa_core::assembly::{block_wire_len, model_wire_len, request_wire_len, PROTOCOL_VERSION};
    use fofa_core::backbone::{block_layout, BackboneConfig};
    use fofa_core::RngState;

    fn payload(cfg: &BackboneConfig, exec: Vec<bool>, rng: &mut RngState) -> ModelPayload {
        let gate = GateIndicator::from_execute(exec);
        let blocks = gate
            .kept()
            .map(|k| {
                let ts = block_layout(cfg)
                    .iter()
                    .map(|s| Tensor::new(&s.shape, rng.normal_vec(s.numel(), 1.0)).unwrap())
                    .collect();
                (k, ts)
            })
            .collect();
        ModelPayload { gate, blocks }
    }

    fn small() -> BackboneConfig {
        let mut c = BackboneConfig::attention(10);
        c.n_blocks = 10;
        c.d = 4;
        c
    }

    #[test]
    fn length_matches_the_core_arithmetic() {
        let cfg = small();
        let mut rng = RngState::new(1);
        let exec = vec![
            true, false, true, true, false, false, false, false, false, true,
        ];
        let p = payload(&cfg, exec, &mut rng);
        let bytes = serialize_model(&p);
        assert_eq!(bytes.len(), model_wire_len(&cfg, &p.gate));
        assert_eq!(
            bytes.len(),
            MODEL_HEADER_LEN + 2 + 4 * block_wire_len(&cfg) + CHECKSUM_LEN
        );
        assert_eq!(deserialize_model(&bytes).unwrap(), p);
    }

    #[test]
    fn empty_bitmap_is_header_and_checksum() {
        let p = ModelPayload {
            gate: GateIndicator::all_skip(6),
            blocks: vec![],
        };
        let bytes = serialize_model(&p);
        assert_eq!(bytes.len(), MODEL_HEADER_LEN + 1 + CHECKSUM_LEN);
        assert_eq!(deserialize_model(&bytes).unwrap(), p);
    }

    #[test]
    fn flipped_byte_fails_the_checksum() {
        let mut rng = RngState::new(2);
        let mut bytes = serialize_model(&payload(&small(), vec![true; 10], &mut rng));
        bytes[40] ^= 0x01;
        assert!(matches!(
            deserialize_model(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn unknown_version_and_truncation() {
        let p = ModelPayload {
            gate: GateIndicator::all_skip(3),
            blocks: vec![],
        };
        let mut bytes = serialize_model(&p);
        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            deserialize_model(&bytes),
            Err(Error::UnknownVersion(9))
        ));
        assert!(matches!(
            deserialize_model(&bytes[..6]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn frame_claiming_more_data_than_present_is_truncated() {
        // a valid checksum over a block that declares one tensor but carries none
        let mut body = Vec::new();
        body.extend_from_slice(&MODEL_MAGIC);
        body.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        body.extend_from_slice(&1u16.to_le_bytes());
        body.push(1);
        body.extend_from_slice(&1u16.to_le_bytes());
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            deserialize_model(&body),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn request_is_fixed_size() {
        let req = DeviceRequest {
            device_id: 77,
            version: PROTOCOL_VERSION,
            beta: StructureLogits::from_rows(&[[0.5, -0.5]; 6]),
            h: LatentInterest {
                h: Tensor::vector(vec![0.25; 64]),
            },
        };
        let bytes = encode_request(&req);
        assert_eq!(bytes.len(), REQUEST_HEADER_LEN + 4 * (2 * 6 + 64));
        assert_eq!(bytes.len(), request_wire_len(6, 64));
        assert_eq!(decode_request(&bytes).unwrap(), req);
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(decode_request(&longer).is_err());
    }

    #[test]
    fn candidates_length() {
        let rows = vec![(3, vec![1.0, 2.0]), (9, vec![-1.0, 0.5])];
        let bytes = encode_candidates(&rows);
        assert_eq!(bytes.len(), fofa_core::assembly::candidate_wire_len(2, 2));
        assert_eq!(decode_candidates(&bytes, 2).unwrap(), rows);
    }
}
