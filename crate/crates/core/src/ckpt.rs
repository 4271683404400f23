//! Binary checkpoint container. Layout:
//!
//! ```text
//! magic "NLEK" | u16 version | u8 kind | u32 config_len | config bytes
//! | u32 param_count | { u16 name_len | name | u8 dtype | u8 ndim
//!   | ndim × u32 dims | little-endian payload }*
//! | u8 has_optimizer [ f64 lr | f64 momentum | u64 step | u64 total
//!   | u32 count | records ] | u8 has_rng [ u64 seed ]
//! | 32-byte SHA-256 of every preceding byte
//! ```
//!
//! Decoding verifies magic, version, structural completeness, and the
//! digest; any corruption is rejected.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::nle::NleMatrix;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"NLEK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkptKind {
    Model,
    NleMatrix,
}

impl CkptKind {
    fn tag(self) -> u8 {
        match self {
            CkptKind::Model => 1,
            CkptKind::NleMatrix => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(CkptKind::Model),
            2 => Ok(CkptKind::NleMatrix),
            other => Err(CoreError::Persistence(format!("unknown kind tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(CoreError::Persistence(format!("unknown dtype tag {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl ParamRecord {
    pub fn from_tensor_f32(name: &str, t: &Tensor<f32>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        ParamRecord {
            name: String::from(name),
            dtype: DType::F32,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn from_f64_slice(name: &str, shape: &[usize], values: &[f64]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * 8);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        ParamRecord {
            name: String::from(name),
            dtype: DType::F64,
            shape: shape.to_vec(),
            payload,
        }
    }

    pub fn to_tensor_f32(&self) -> Result<Tensor<f32>> {
        if self.dtype != DType::F32 {
            return Err(CoreError::Persistence(format!(
                "parameter {} has dtype {:?}, expected f32",
                self.name, self.dtype
            )));
        }
        let values: Vec<f32> = self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(&self.shape, values)
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        if self.dtype != DType::F64 {
            return Err(CoreError::Persistence(format!(
                "parameter {} has dtype {:?}, expected f64",
                self.name, self.dtype
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlob {
    pub initial_lr: f64,
    pub momentum: f64,
    pub step: u64,
    pub total: u64,
    pub velocity: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: CkptKind,
    pub config: Vec<u8>,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerBlob>,
    pub rng_seed: Option<u64>,
}

fn put_record(out: &mut Vec<u8>, r: &ParamRecord) {
    out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
    out.extend_from_slice(r.name.as_bytes());
    out.push(r.dtype.tag());
    out.push(r.shape.len() as u8);
    for &d in &r.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&r.payload);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Persistence(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn record(&mut self) -> Result<ParamRecord> {
        let name_len = self.u16()? as usize;
        let name = core::str::from_utf8(self.take(name_len)?)
            .map_err(|_| CoreError::Persistence("parameter name is not UTF-8".into()))?
            .into();
        let dtype = DType::from_tag(self.u8()?)?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = self.take(count * dtype.size())?.to_vec();
        Ok(ParamRecord {
            name,
            dtype,
            shape,
            payload,
        })
    }
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for r in &self.params {
            put_record(&mut out, r);
        }
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.initial_lr.to_le_bytes());
                out.extend_from_slice(&opt.momentum.to_le_bytes());
                out.extend_from_slice(&opt.step.to_le_bytes());
                out.extend_from_slice(&opt.total.to_le_bytes());
                out.extend_from_slice(&(opt.velocity.len() as u32).to_le_bytes());
                for r in &opt.velocity {
                    put_record(&mut out, r);
                }
            }
            None => out.push(0),
        }
        match self.rng_seed {
            Some(seed) => {
                out.push(1);
                out.extend_from_slice(&seed.to_le_bytes());
            }
            None => out.push(0),
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < MAGIC.len() + 2 + 32 {
            return Err(CoreError::Persistence("checkpoint too short".into()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 32);
        let expected = Sha256::digest(payload);
        if expected.as_slice() != tail {
            return Err(CoreError::Persistence("digest mismatch".into()));
        }
        let mut r = Reader {
            bytes: payload,
            pos: 0,
        };
        if r.take(4)? != MAGIC {
            return Err(CoreError::Persistence("bad magic, not an NLEK checkpoint".into()));
        }
        let version = r.u16()?;
        if version > VERSION {
            return Err(CoreError::Persistence(format!(
                "checkpoint format version {version} is newer than supported {VERSION}"
            )));
        }
        let kind = CkptKind::from_tag(r.u8()?)?;
        let config_len = r.u32()? as usize;
        let config = r.take(config_len)?.to_vec();
        let param_count = r.u32()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            params.push(r.record()?);
        }
        let optimizer = if r.u8()? == 1 {
            let initial_lr = r.f64()?;
            let momentum = r.f64()?;
            let step = r.u64()?;
            let total = r.u64()?;
            let count = r.u32()? as usize;
            let mut velocity = Vec::with_capacity(count);
            for _ in 0..count {
                velocity.push(r.record()?);
            }
            Some(OptimizerBlob {
                initial_lr,
                momentum,
                step,
                total,
                velocity,
            })
        } else {
            None
        };
        let rng_seed = if r.u8()? == 1 { Some(r.u64()?) } else { None };
        if r.pos != payload.len() {
            return Err(CoreError::Persistence(format!(
                "{} trailing bytes after checkpoint body",
                payload.len() - r.pos
            )));
        }
        Ok(Container {
            kind,
            config,
            params,
            optimizer,
            rng_seed,
        })
    }

    /// The trailing digest of an encoded checkpoint, verified against the
    /// payload before being returned.
    pub fn digest_of(encoded: &[u8]) -> Result<[u8; 32]> {
        if encoded.len() < 32 {
            return Err(CoreError::Persistence("checkpoint too short".into()));
        }
        let (payload, tail) = encoded.split_at(encoded.len() - 32);
        let expected = Sha256::digest(payload);
        if expected.as_slice() != tail {
            return Err(CoreError::Persistence("digest mismatch".into()));
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(tail);
        Ok(out)
    }
}

/// Persist an NLE matrix (kind tag `nle_matrix`, logits stored as f64).
pub fn nle_to_container<T: Real>(nle: &NleMatrix<T>) -> Container {
    let k = nle.num_classes();
    let logits: Vec<f64> = nle.logits().iter().map(|v| v.to_f64()).collect();
    let mut config = Vec::new();
    config.extend_from_slice(&(k as u32).to_le_bytes());
    Container {
        kind: CkptKind::NleMatrix,
        config,
        params: alloc::vec![ParamRecord::from_f64_slice(
            "nle_matrix.logits",
            &[k, k],
            &logits
        )],
        optimizer: None,
        rng_seed: None,
    }
}

pub fn nle_from_container<T: Real>(c: &Container) -> Result<NleMatrix<T>> {
    if c.kind != CkptKind::NleMatrix {
        return Err(CoreError::Persistence(
            "checkpoint does not hold an NLE matrix".into(),
        ));
    }
    if c.config.len() != 4 {
        return Err(CoreError::Persistence("malformed NLE config blob".into()));
    }
    let k = u32::from_le_bytes([c.config[0], c.config[1], c.config[2], c.config[3]]) as usize;
    let rec = c
        .params
        .iter()
        .find(|r| r.name == "nle_matrix.logits")
        .ok_or_else(|| CoreError::Persistence("missing nle_matrix.logits record".into()))?;
    if rec.shape != [k, k] {
        return Err(CoreError::Persistence(format!(
            "NLE logits shape {:?} does not match K={k}",
            rec.shape
        )));
    }
    let logits = rec.to_f64_vec()?;
    NleMatrix::from_logits(k, logits.into_iter().map(T::from_f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_container() -> Container {
        let t = Tensor::<f32>::uniform(&[3, 2], 1.0, 5, "ckpt-test", 0);
        Container {
            kind: CkptKind::Model,
            config: alloc::vec![7, 8, 9],
            params: alloc::vec![ParamRecord::from_tensor_f32("fc.weight", &t)],
            optimizer: Some(OptimizerBlob {
                initial_lr: 0.01,
                momentum: 0.9,
                step: 3,
                total: 100,
                velocity: alloc::vec![ParamRecord::from_tensor_f32("fc.weight", &t)],
            }),
            rng_seed: Some(42),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample_container();
        let bytes = c.encode();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(c, back);
        assert_eq!(bytes, back.encode());
    }

    #[test]
    fn corrupting_any_payload_byte_fails_the_digest() {
        let bytes = sample_container().encode();
        for idx in [0usize, 6, 20, bytes.len() - 40] {
            let mut bad = bytes.clone();
            bad[idx] ^= 0x01;
            let err = Container::decode(&bad).unwrap_err();
            assert!(
                matches!(err, CoreError::Persistence(_)),
                "index {idx}: {err:?}"
            );
        }
    }

    #[test]
    fn newer_version_is_rejected_explicitly() {
        let mut bytes = sample_container().encode();
        // Bump the version field and re-seal so the digest is valid again.
        let new_version = (VERSION + 1).to_le_bytes();
        bytes[4] = new_version[0];
        bytes[5] = new_version[1];
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let err = Container::decode(&bytes).unwrap_err();
        match err {
            CoreError::Persistence(msg) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample_container().encode();
        let err = Container::decode(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(matches!(err, CoreError::Persistence(_)));
    }

    #[test]
    fn nle_round_trip() {
        let nle = NleMatrix::<f64>::from_logits(3, (0..9).map(|i| i as f64 * 0.25).collect())
            .unwrap();
        let c = nle_to_container(&nle);
        let bytes = c.encode();
        let back: NleMatrix<f64> = nle_from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(nle.logits(), back.logits());
    }
}
