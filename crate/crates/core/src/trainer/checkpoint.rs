//! Binary checkpoint: `FGCK`, u32 version, u32-length-prefixed JSON header,
//! parameter records, then optimizer moment records. A record is a u16 name
//! length, the UTF-8 name, u8 rank, u32 dims and f32 data, all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::vagfem::VagfemModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam_m/";
const SECOND_MOMENT: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub first_moments: Vec<Tensor<f32>>,
    pub second_moments: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    seed: u64,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name:?}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name:?}: dims overflow")))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name:?}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.config.seed,
        })?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            put_record(&mut out, &p.name, &p.value)?;
        }
        out.extend_from_slice(&((self.first_moments.len() + self.second_moments.len()) as u32).to_le_bytes());
        for (prefix, moments) in [(FIRST_MOMENT, &self.first_moments), (SECOND_MOMENT, &self.second_moments)] {
            for (p, m) in self.params.iter().zip(moments.iter()) {
                put_record(&mut out, &format!("{prefix}{}", p.name), m)?;
            }
        }
        Ok(out)
    }

    /// Parses and validates a checkpoint; parameter shapes are checked
    /// against the embedded configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.record()?;
            params
                .insert(name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let moment_count = r.u32()? as usize;
        if moment_count != 2 * params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} moment records, found {moment_count}",
                2 * params.len()
            )));
        }
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let mut moments = Vec::with_capacity(moment_count);
        for i in 0..moment_count {
            let (name, t) = r.record()?;
            let (prefix, idx) = if i < params.len() {
                (FIRST_MOMENT, i)
            } else {
                (SECOND_MOMENT, i - params.len())
            };
            let expected = format!("{prefix}{}", names[idx]);
            if name != expected {
                return Err(Error::Checkpoint(format!("expected record {expected:?}, found {name:?}")));
            }
            moments.push(t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let second_moments = moments.split_off(params.len());
        // validates names and shapes against the configuration
        VagfemModel::from_params(header.config.fusion.clone(), params.clone())?;
        super::AdamW::from_state(
            header.config.adamw(),
            &params,
            header.step,
            moments.clone(),
            second_moments.clone(),
        )?;
        Ok(Self {
            config: header.config,
            step: header.step,
            params,
            first_moments: moments,
            second_moments,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> Result<VagfemModel<f32>> {
        VagfemModel::from_params(self.config.fusion.clone(), self.params.clone())
    }
}

/// Hex SHA-256 of a checkpoint file, used to tag evaluation reports.
pub fn checkpoint_id(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
