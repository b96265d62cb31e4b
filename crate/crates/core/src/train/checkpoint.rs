//! Binary checkpoints.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! "ABNN" u32 version
//! u8 dtype (4 | 8) u8 defense u32 epoch u64 seed u64 config_hash
//! f64 sigma0 f64 alpha u32 rank u32×rank input_shape
//! u32 n_layers, then per layer:
//!   u8 kind (0 linear, 1 conv2d, 2 relu, 3 flatten)
//!   linear/conv2d: u8 flags (1 variational, 2 bias) u32 rank u32×rank weight_shape
//!                  conv2d only: u32 stride u32 padding
//! arrays, layer by layer: μ then s (variational) or w, then bias
//! ```

use std::path::Path;

use thiserror::Error;

use super::DefenseMode;
use crate::bayes::{Layer, Network, Prior, VariationalParams, Weights};
use crate::error::Result;
use crate::nd::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ABNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("corrupt header: {0}")]
    Corrupt(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub defense: DefenseMode,
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: u64,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { defense: DefenseMode::None, epoch: 0, seed: 0, config_hash: 0 }
    }
}

const KIND_LINEAR: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_FLATTEN: u8 = 3;
const FLAG_VARIATIONAL: u8 = 1;
const FLAG_BIAS: u8 = 2;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
}

pub fn encode_checkpoint<T: Real>(net: &Network<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.size() as u8);
    out.push(meta.defense.code());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.config_hash.to_le_bytes());
    out.extend_from_slice(&net.prior().sigma0().to_le_bytes());
    out.extend_from_slice(&net.alpha().to_le_bytes());
    put_shape(&mut out, net.input_shape());
    put_u32(&mut out, net.layers().len());
    for layer in net.layers() {
        let (kind, conv) = match layer {
            Layer::Linear { .. } => (KIND_LINEAR, None),
            Layer::Conv2d { stride, padding, .. } => (KIND_CONV, Some((*stride, *padding))),
            Layer::Relu => (KIND_RELU, None),
            Layer::Flatten => (KIND_FLATTEN, None),
        };
        out.push(kind);
        if let Some(w) = layer.weights() {
            let mut flags = 0;
            if layer.is_variational() {
                flags |= FLAG_VARIATIONAL;
            }
            if layer.bias().is_some() {
                flags |= FLAG_BIAS;
            }
            out.push(flags);
            put_shape(&mut out, w.shape());
        }
        if let Some((stride, padding)) = conv {
            put_u32(&mut out, stride);
            put_u32(&mut out, padding);
        }
    }
    for p in net.params() {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n, len: self.bytes.len() });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn shape(&mut self) -> Result<Vec<usize>, CheckpointError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("tensor rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn tensor<T: Real>(&mut self, shape: &[usize], dtype: DType) -> Result<Tensor<T>, CheckpointError> {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("shape {shape:?} overflows")))?;
        let width = dtype.size();
        let bytes = self.take(n.saturating_mul(width))?;
        let data = bytes
            .chunks_exact(width)
            .map(|c| match dtype {
                DType::F32 => T::of(f64::from(f32::read_le(c))),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        Ok(Tensor::new(shape.to_vec(), data).expect("length computed from shape"))
    }
}

struct LayerHeader {
    kind: u8,
    variational: bool,
    bias: bool,
    shape: Vec<usize>,
    stride: usize,
    padding: usize,
}

/// Stored value width of an encoded checkpoint.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = Reader { bytes, pos: 0 };
    read_preamble(&mut r)?;
    Ok(read_dtype(&mut r)?)
}

fn read_preamble(r: &mut Reader<'_>) -> Result<(), CheckpointError> {
    let magic: [u8; 4] = r.array()?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    Ok(())
}

fn read_dtype(r: &mut Reader<'_>) -> Result<DType, CheckpointError> {
    match r.u8()? {
        4 => Ok(DType::F32),
        8 => Ok(DType::F64),
        other => Err(CheckpointError::Corrupt(format!("value width {other}"))),
    }
}

/// Decodes a checkpoint; stored values are converted to `T`.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Network<T>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    read_preamble(&mut r)?;
    let dtype = read_dtype(&mut r)?;
    let defense =
        DefenseMode::from_code(r.u8()?).ok_or_else(|| CheckpointError::Corrupt("unknown defense mode".into()))?;
    let meta = CheckpointMeta { defense, epoch: r.u32()?, seed: r.u64()?, config_hash: r.u64()? };
    let sigma0 = r.f64()?;
    let alpha = r.f64()?;
    let input_shape = r.shape()?;
    let n_layers = r.u32()? as usize;
    if n_layers > 1024 {
        return Err(CheckpointError::Corrupt(format!("{n_layers} layers")).into());
    }
    let mut headers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = r.u8()?;
        let mut h = LayerHeader { kind, variational: false, bias: false, shape: Vec::new(), stride: 0, padding: 0 };
        match kind {
            KIND_LINEAR | KIND_CONV => {
                let flags = r.u8()?;
                if flags & !(FLAG_VARIATIONAL | FLAG_BIAS) != 0 {
                    return Err(CheckpointError::Corrupt(format!("layer flags {flags:#x}")).into());
                }
                h.variational = flags & FLAG_VARIATIONAL != 0;
                h.bias = flags & FLAG_BIAS != 0;
                h.shape = r.shape()?;
                let want = if kind == KIND_LINEAR { 2 } else { 4 };
                if h.shape.len() != want {
                    return Err(CheckpointError::ShapeMismatch(format!(
                        "layer {} weight has rank {}, expected {want}",
                        headers.len(),
                        h.shape.len()
                    ))
                    .into());
                }
                if kind == KIND_CONV {
                    h.stride = r.u32()? as usize;
                    h.padding = r.u32()? as usize;
                }
            }
            KIND_RELU | KIND_FLATTEN => {}
            other => return Err(CheckpointError::Corrupt(format!("layer kind {other}")).into()),
        }
        headers.push(h);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for h in headers {
        let layer = match h.kind {
            KIND_RELU => Layer::Relu,
            KIND_FLATTEN => Layer::Flatten,
            _ => {
                let weight = if h.variational {
                    let mu = r.tensor(&h.shape, dtype)?;
                    let s = r.tensor(&h.shape, dtype)?;
                    Weights::Variational(VariationalParams::new(mu, s)?)
                } else {
                    Weights::Fixed(r.tensor(&h.shape, dtype)?)
                };
                let bias = if h.bias { Some(r.tensor(&h.shape[..1], dtype)?) } else { None };
                if h.kind == KIND_LINEAR {
                    Layer::Linear { weight, bias }
                } else {
                    Layer::Conv2d { weight, bias, stride: h.stride, padding: h.padding }
                }
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    let prior = Prior::new(sigma0).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let net = Network::new(layers, input_shape, prior, alpha).map_err(|e| match e {
        crate::error::Error::Domain(msg) => CheckpointError::Corrupt(msg),
        other => CheckpointError::ShapeMismatch(other.to_string()),
    })?;
    Ok((net, meta))
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(net, meta))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, CheckpointMeta)> {
    decode_checkpoint(&crate::error::read_file(path)?)
}
