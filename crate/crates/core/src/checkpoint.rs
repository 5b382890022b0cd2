//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "STEMSEG\0"
//! version    u32      1
//! config     u32 length + UTF-8 JSON of the NetworkConfig
//! metadata   u32 length + UTF-8 JSON object (training state; `{}` if none)
//! tensors    u32 count, then per tensor:
//!              u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!              u32 rank, u64 extent per axis, values
//! running    u32 count, then per batch-norm layer:
//!              u32 name length, name bytes, u8 dtype, u64 update count,
//!              u32 channels, means, variances
//! checksum   u64 FNV-1a over every preceding byte
//! ```
//!
//! Tensors and running statistics are written in name order, so encoding
//! is deterministic and a load/save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::BatchNormStats;
use crate::error::{Error, Result};
use crate::netarch::{ModelParams, NetworkConfig};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"STEMSEG\0";
pub const VERSION: u32 = 1;

/// Decoded contents of a parameter file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile<T> {
    pub config: NetworkConfig,
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub running: BTreeMap<String, BatchNormStats<T>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

impl<T: Scalar> ParamFile<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.config).expect("config serializes"));
        put_str(&mut out, &serde_json::to_string(&self.metadata).expect("json serializes"));
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(T::DTYPE as u8);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        put_u32(&mut out, self.running.len());
        for (name, s) in &self.running {
            put_str(&mut out, name);
            out.push(T::DTYPE as u8);
            out.extend_from_slice(&s.updates.to_le_bytes());
            put_u32(&mut out, s.mean.len());
            for &v in s.mean.iter().chain(&s.var) {
                v.write_le(&mut out);
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(Error::CorruptFile(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::CorruptFile("checksum mismatch (truncated or damaged)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptFile(format!("unsupported version {version}")));
        }
        let config: NetworkConfig = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::CorruptFile(format!("config: {e}")))?;
        let metadata: serde_json::Value = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::CorruptFile(format!("metadata: {e}")))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = r.dtype()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.values::<T>(dtype, n)?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut running = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = r.dtype()?;
            let updates = r.u64()?;
            let c = r.u32()? as usize;
            let mean = r.values::<T>(dtype, c)?;
            let var = r.values::<T>(dtype, c)?;
            running.insert(name, BatchNormStats { mean, var, updates });
        }
        if r.pos != body.len() {
            return Err(Error::CorruptFile(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(ParamFile {
            config,
            metadata,
            tensors,
            running,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::dataio::write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Split into model parameters, keeping only tensors that are part of
    /// the network layout.
    pub fn into_params(self, expected: &NetworkConfig) -> Result<ModelParams<T>> {
        if &self.config != expected {
            return Err(Error::ConfigMismatch {
                stored: self.config.summary(),
                expected: expected.summary(),
            });
        }
        let layout: std::collections::BTreeSet<String> = crate::netarch::param_layout(expected)
            .into_iter()
            .map(|s| s.name)
            .collect();
        let params = ModelParams {
            tensors: self
                .tensors
                .into_iter()
                .filter(|(k, _)| layout.contains(k))
                .collect(),
            running: self.running,
        };
        params.check_layout(expected)?;
        Ok(params)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptFile("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptFile("invalid UTF-8".into()))
    }

    fn dtype(&mut self) -> Result<DType> {
        let tag = self.take(1)?[0];
        DType::from_tag(tag).ok_or_else(|| Error::CorruptFile(format!("unknown dtype tag {tag}")))
    }

    fn values<T: Scalar>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        let size = dtype.size();
        let bytes = self.take(n.checked_mul(size).ok_or_else(|| Error::CorruptFile("overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(size)
            .map(|c| match dtype {
                DType::F32 => T::from_f64_lossy(f32::read_le(c) as f64),
                DType::F64 => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect())
    }
}

pub fn save_params<T: Scalar>(params: &ModelParams<T>, cfg: &NetworkConfig, path: &Path) -> Result<()> {
    ParamFile {
        config: cfg.clone(),
        metadata: serde_json::json!({}),
        tensors: params.tensors.clone(),
        running: params.running.clone(),
    }
    .write(path)
}

/// Load parameters, refusing files written for a different configuration.
pub fn load_params<T: Scalar>(path: &Path, expected: &NetworkConfig) -> Result<ModelParams<T>> {
    ParamFile::<T>::read(path)?.into_params(expected)
}
