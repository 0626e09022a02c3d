//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TCE1" | u32 version | u32 len, config echo (UTF-8) | u32 count
//! count × { u32 len, name | u32 rank | rank × u32 dim | u8 dtype | data }
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::params::ModelParams;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TCE1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl StoredTensor {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{} is stored as {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let values = self.data.chunks_exact(self.dtype.size()).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_echo: String,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(config_echo: &str, params: &ModelParams<T>) -> Self {
        let tensors = params
            .entries()
            .iter()
            .map(|e| {
                let mut data = Vec::with_capacity(e.tensor.len() * T::DTYPE.size());
                e.tensor.data().iter().for_each(|&v| v.write_le(&mut data));
                StoredTensor {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    dtype: T::DTYPE,
                    data,
                }
            })
            .collect();
        Self {
            version: VERSION,
            config_echo: config_echo.to_string(),
            tensors,
        }
    }

    /// Overwrites every tensor of `params` by name. The stored set must match
    /// exactly.
    pub fn load_into<T: Scalar>(&self, params: &mut ModelParams<T>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for stored in &self.tensors {
            let id = params
                .find(&stored.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no tensor {:?}", stored.name)))?;
            if params.get(id).shape() != stored.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, model shape {:?}",
                    stored.name,
                    stored.shape,
                    params.get(id).shape()
                )));
            }
            params.set(id, stored.to_tensor()?)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_bytes(&mut out, self.config_echo.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_bytes(&mut out, t.name.as_bytes());
            put_u32(&mut out, t.shape.len() as u32);
            t.shape.iter().for_each(|&d| put_u32(&mut out, d as u32));
            out.push(t.dtype.tag());
            out.extend_from_slice(&t.data);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing TCE1 magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_echo = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let len = shape
                .iter()
                .try_fold(dtype.size(), |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let data = r.take(len)?.to_vec();
            tensors.push(StoredTensor {
                name,
                shape,
                dtype,
                data,
            });
        }
        if r.at != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.at)));
        }
        Ok(Self {
            version,
            config_echo,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Rebuilds the model described by the config echo and loads its tensors.
    pub fn model<T: Scalar>(&self) -> Result<(RunConfig, Model<T>)> {
        let config = RunConfig::parse(&self.config_echo)?;
        let mut model = Model::new(config.network.clone(), config.train.seed)?;
        self.load_into(&mut model.params)?;
        Ok((config, model))
    }
}

pub fn save_model<T: Scalar>(path: &Path, config: &RunConfig, model: &Model<T>) -> Result<()> {
    Checkpoint::from_params(&config.echo(), &model.params).save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(RunConfig, Model<T>)> {
    Checkpoint::load(path)?.model()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
