//! The APEX binary container.
//!
//! ```text
//! magic      8 bytes  "APEXTNSR"
//! version    u16 LE   (currently 1)
//! kind       u8       0 feature map, 1 spectrogram, 2 head, 3 bank, 4 state
//! dtype      u8       0 f32, 1 f64
//! rank       u8
//! dims       u64 LE × rank
//! meta_len   u32 LE
//! meta       meta_len bytes of UTF-8 JSON
//! payload    prod(dims) values, little endian, row-major
//! crc32      u32 LE   IEEE CRC-32 of the payload bytes
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::tensor::{ClassifierHead, FeatureMap, SpectrogramImage};
use crate::error::{ApexError, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"APEXTNSR";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    FeatureMap = 0,
    Spectrogram = 1,
    Head = 2,
    Bank = 3,
    State = 4,
}

impl Kind {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Kind::FeatureMap,
            1 => Kind::Spectrogram,
            2 => Kind::Head,
            3 => Kind::Bank,
            4 => Kind::State,
            other => return Err(ApexError::Format(format!("unknown container kind {other}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(ApexError::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            Payload::F32(v) => v.iter().all(|x| x.is_finite()),
            Payload::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// A decoded container with its metadata left as raw JSON bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub dims: Vec<u64>,
    pub meta: Vec<u8>,
    pub payload: Payload,
}

impl Container {
    pub fn new<M: Serialize>(kind: Kind, dims: Vec<u64>, meta: &M, payload: Payload) -> Result<Self> {
        let expected: u64 = dims.iter().product();
        if expected != payload.len() as u64 {
            return Err(ApexError::Shape(format!(
                "container dims {dims:?} imply {expected} values, payload has {}",
                payload.len()
            )));
        }
        let meta = serde_json::to_vec(meta)
            .map_err(|e| ApexError::Format(format!("cannot encode container metadata: {e}")))?;
        Ok(Self {
            kind,
            dims,
            meta,
            payload,
        })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_slice(&self.meta)
            .map_err(|e| ApexError::Format(format!("bad container metadata: {e}")))
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(ApexError::Format(format!(
                "expected a {kind:?} container, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.meta.len() + self.payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(self.payload.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.meta);
        let payload_start = out.len();
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(ApexError::Format("bad magic, not an APEX container".into()));
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(ApexError::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let kind = Kind::from_code(cur.take(1)?[0])?;
        let dtype = DType::from_code(cur.take(1)?[0])?;
        let rank = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(cur.array()?));
        }
        let meta_len = u32::from_le_bytes(cur.array()?) as usize;
        let meta = cur.take(meta_len)?.to_vec();

        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| usize::try_from(c).ok())
            .ok_or_else(|| ApexError::Format(format!("dims {dims:?} overflow")))?;
        let byte_len = count
            .checked_mul(dtype.size())
            .ok_or_else(|| ApexError::Format(format!("dims {dims:?} overflow")))?;
        if cur.remaining() < byte_len + 4 {
            return Err(ApexError::Format(format!(
                "truncated payload: header declares {count} values ({byte_len} bytes + crc), {} bytes remain",
                cur.remaining()
            )));
        }
        let raw = cur.take(byte_len)?;
        let crc = u32::from_le_bytes(cur.array()?);
        if cur.remaining() != 0 {
            return Err(ApexError::Format(format!(
                "{} unexpected trailing bytes after payload",
                cur.remaining()
            )));
        }
        if crc32fast::hash(raw) != crc {
            return Err(ApexError::Format("payload CRC mismatch".into()));
        }
        let payload = match dtype {
            DType::F32 => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        if !payload.all_finite() {
            return Err(ApexError::Data("container payload contains non-finite values".into()));
        }
        Ok(Self {
            kind,
            dims,
            meta,
            payload,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            ApexError::Format(m) => ApexError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(ApexError::Format("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureMapMeta {
    sample_id: String,
    input_freq_bins: usize,
    input_time_frames: usize,
}

#[derive(Serialize, Deserialize)]
struct SpectrogramMeta {
    sample_id: String,
}

#[derive(Default, Serialize, Deserialize)]
struct HeadMeta {}

/// Any of the tensor-like objects the container carries.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorFile {
    FeatureMap(FeatureMap),
    Spectrogram(SpectrogramImage),
    Head(ClassifierHead),
}

impl From<FeatureMap> for TensorFile {
    fn from(v: FeatureMap) -> Self {
        TensorFile::FeatureMap(v)
    }
}

impl From<SpectrogramImage> for TensorFile {
    fn from(v: SpectrogramImage) -> Self {
        TensorFile::Spectrogram(v)
    }
}

impl From<ClassifierHead> for TensorFile {
    fn from(v: ClassifierHead) -> Self {
        TensorFile::Head(v)
    }
}

impl TensorFile {
    pub fn to_container(&self) -> Result<Container> {
        match self {
            TensorFile::FeatureMap(fm) => {
                fm.validate()?;
                Container::new(
                    Kind::FeatureMap,
                    vec![fm.freq_bins as u64, fm.time_frames as u64, fm.channels as u64],
                    &FeatureMapMeta {
                        sample_id: fm.sample_id.clone(),
                        input_freq_bins: fm.input_freq_bins,
                        input_time_frames: fm.input_time_frames,
                    },
                    Payload::F32(fm.values.clone()),
                )
            }
            TensorFile::Spectrogram(sp) => {
                sp.validate()?;
                Container::new(
                    Kind::Spectrogram,
                    vec![sp.freq_bins as u64, sp.time_frames as u64],
                    &SpectrogramMeta {
                        sample_id: sp.sample_id.clone(),
                    },
                    Payload::F32(sp.values.clone()),
                )
            }
            TensorFile::Head(head) => {
                // Row n holds [W[n, :], b[n]].
                let (n, d) = (head.num_classes(), head.channels());
                let mut rows = Vec::with_capacity(n * (d + 1));
                for r in 0..n {
                    rows.extend(head.weights.row(r).iter().map(|&w| w as f32));
                    rows.push(head.bias[r] as f32);
                }
                Container::new(
                    Kind::Head,
                    vec![n as u64, d as u64 + 1],
                    &HeadMeta::default(),
                    Payload::F32(rows),
                )
            }
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let dim = |i: usize| -> Result<usize> {
            c.dims
                .get(i)
                .map(|&d| d as usize)
                .ok_or_else(|| ApexError::Format(format!("{:?} container has rank {}", c.kind, c.dims.len())))
        };
        match c.kind {
            Kind::FeatureMap => {
                let meta: FeatureMapMeta = c.meta()?;
                let values = match &c.payload {
                    Payload::F32(v) => v.clone(),
                    Payload::F64(_) => return Err(ApexError::Format("feature maps must be f32".into())),
                };
                Ok(TensorFile::FeatureMap(FeatureMap::new(
                    meta.sample_id,
                    (dim(0)?, dim(1)?, dim(2)?),
                    (meta.input_freq_bins, meta.input_time_frames),
                    values,
                )?))
            }
            Kind::Spectrogram => {
                let meta: SpectrogramMeta = c.meta()?;
                let values = match &c.payload {
                    Payload::F32(v) => v.clone(),
                    Payload::F64(_) => return Err(ApexError::Format("spectrograms must be f32".into())),
                };
                Ok(TensorFile::Spectrogram(SpectrogramImage::new(
                    meta.sample_id,
                    dim(0)?,
                    dim(1)?,
                    values,
                )?))
            }
            Kind::Head => {
                let (n, d1) = (dim(0)?, dim(1)?);
                if d1 == 0 {
                    return Err(ApexError::Format("head container needs a bias column".into()));
                }
                let vals = c.payload.to_f64();
                let d = d1 - 1;
                let weights = Matrix::from_fn(n, d, |r, col| vals[r * d1 + col]);
                let bias = (0..n).map(|r| vals[r * d1 + d]).collect();
                Ok(TensorFile::Head(ClassifierHead::new(weights, bias)?))
            }
            other => Err(ApexError::Format(format!(
                "{other:?} containers are not plain tensors"
            ))),
        }
    }
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_container(&Container::read(path)?)
}

pub fn write_tensor_file(obj: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    obj.to_container()?.write(path)
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    match read_tensor_file(path)? {
        TensorFile::FeatureMap(f) => Ok(f),
        other => Err(ApexError::Format(format!("expected feature map, found {}", other.kind_name()))),
    }
}

pub fn read_spectrogram(path: impl AsRef<Path>) -> Result<SpectrogramImage> {
    match read_tensor_file(path)? {
        TensorFile::Spectrogram(s) => Ok(s),
        other => Err(ApexError::Format(format!("expected spectrogram, found {}", other.kind_name()))),
    }
}

pub fn read_head(path: impl AsRef<Path>) -> Result<ClassifierHead> {
    match read_tensor_file(path)? {
        TensorFile::Head(h) => Ok(h),
        other => Err(ApexError::Format(format!("expected classifier head, found {}", other.kind_name()))),
    }
}

impl TensorFile {
    fn kind_name(&self) -> &'static str {
        match self {
            TensorFile::FeatureMap(_) => "feature map",
            TensorFile::Spectrogram(_) => "spectrogram",
            TensorFile::Head(_) => "classifier head",
        }
    }
}
