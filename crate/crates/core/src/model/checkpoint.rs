//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ADCKPT\0\0"
//! version  u32
//! meta     u64 length + JSON (model config, loss constants, class, epoch)
//! count    u32
//! tensor*  u16 name length, name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//!          rank × u64 dims, raw little-endian values
//! sha256   32 bytes over everything above
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::FocalLoss;
use super::params::{ClassifierParams, ModelConfig};
use super::Classifier;
use crate::error::{Error, IoContext, Result};
use crate::types::ClassName;

const MAGIC: &[u8; 8] = b"ADCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub focal: FocalLoss,
    pub class_name: ClassName,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ClassifierParams,
}

impl Checkpoint {
    pub fn classifier(&self) -> Classifier {
        Classifier {
            config: self.meta.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);

        let enc = self.params.encoder_tensors();
        let att = self.params.attention.named_tensors();
        buf.extend_from_slice(&((enc.len() + att.len()) as u32).to_le_bytes());
        for (name, shape, data) in &enc {
            write_header(&mut buf, name, 0, shape);
            data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        for (name, shape, data) in &att {
            write_header(&mut buf, name, 1, shape);
            data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.model.validate()?;
        let mut params = ClassifierParams::zeros(&meta.model);

        let count = r.u32()? as usize;
        let mut seen = Vec::with_capacity(count);
        let mut enc_slots: Vec<(String, Vec<usize>)> = params
            .encoder_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let att_slots: Vec<(&'static str, Vec<usize>)> = params
            .attention
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let mut enc_dst = params.encoder_tensors_mut();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if dtype == 0 {
                let slot = enc_slots
                    .iter()
                    .position(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
                check_shape(&name, &enc_slots[slot].1, &shape)?;
                let raw = r.take(numel * 4)?;
                for (d, c) in enc_dst[slot].iter_mut().zip(raw.chunks_exact(4)) {
                    *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                }
                enc_slots[slot].0.clear();
            } else if dtype == 1 {
                let slot = att_slots
                    .iter()
                    .position(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
                check_shape(&name, &att_slots[slot].1, &shape)?;
                let raw = r.take(numel * 8)?.to_vec();
                seen.push((slot, raw));
            } else {
                return Err(Error::Format(format!("unknown dtype {dtype} for {name}")));
            }
        }
        drop(enc_dst);
        if let Some((n, _)) = enc_slots.iter().find(|(n, _)| !n.is_empty()) {
            return Err(Error::Format(format!("missing tensor {n}")));
        }
        if seen.len() != att_slots.len() {
            return Err(Error::Format("missing attention tensors".into()));
        }
        let mut att_dst = params.attention.tensors_mut();
        for (slot, raw) in seen {
            for (d, c) in att_dst[slot].iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        drop(att_dst);
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        if !params.is_finite() {
            return Err(Error::Validation("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Atomic write through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).at(&tmp)?;
        f.write_all(&bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes)
    }
}

fn check_shape(name: &str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!(
            "tensor {name}: expected {expected:?}, found {got:?}"
        )));
    }
    Ok(())
}

fn write_header(buf: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
