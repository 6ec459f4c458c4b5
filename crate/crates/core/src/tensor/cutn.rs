//! Binary tensor container.
//!
//! Layout: magic `CUTN`, version `u32` LE, dtype `u8` (0 = f32, 1 = f64,
//! 2 = u8), ndim `u8`, then ndim extents as `u32` LE, then the row-major
//! payload in little-endian order. Encoding is canonical: decoding and
//! re-encoding reproduces the bytes exactly.

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CUTN";
pub const VERSION: u32 = 1;

/// Raw byte tensor, used for images stored as `u8` and for opaque payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawU8 {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

/// A decoded tensor of any supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(RawU8),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => &t.shape,
        }
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "CUTN",
        detail: detail.into(),
    }
}

fn encode_header(out: &mut Vec<u8>, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(bad(format!("rank {} exceeds 255", shape.len())));
    }
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| bad(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// Serializes a float tensor.
pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + 4 * t.shape().len() + t.numel() * T::DTYPE.size_bytes());
    encode_header(&mut out, T::DTYPE, t.shape())?;
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Serializes a raw byte tensor.
pub fn encode_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(bad(format!(
            "shape {shape:?} wants {numel} bytes, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(10 + 4 * shape.len() + data.len());
    encode_header(&mut out, DType::U8, shape)?;
    out.extend_from_slice(data);
    Ok(out)
}

pub fn encode_any(t: &AnyTensor) -> Result<Vec<u8>> {
    match t {
        AnyTensor::F32(t) => encode(t),
        AnyTensor::F64(t) => encode(t),
        AnyTensor::U8(t) => encode_u8(&t.shape, &t.data),
    }
}

/// Decodes one tensor from `r`, leaving the reader just past its payload.
pub fn decode_from(r: &mut impl Read) -> Result<AnyTensor> {
    let mut head = [0u8; 10];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if head[0..4] != MAGIC {
        return Err(bad(format!("bad magic {:02x?}", &head[0..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(head[8]).ok_or_else(|| bad(format!("unknown dtype {}", head[8])))?;
    let ndim = head[9] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut ext = [0u8; 4];
    for _ in 0..ndim {
        r.read_exact(&mut ext).map_err(|_| bad("truncated extents"))?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    if shape.contains(&0) {
        return Err(bad(format!("zero extent in {shape:?}")));
    }
    let mut payload = vec![0u8; numel * dtype.size_bytes()];
    r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload::<f32>(shape, &payload)),
        DType::F64 => AnyTensor::F64(decode_payload::<f64>(shape, &payload)),
        DType::U8 => AnyTensor::U8(RawU8 {
            shape,
            data: payload,
        }),
    })
}

fn decode_payload<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let sz = T::DTYPE.size_bytes();
    let data = payload.chunks_exact(sz).map(T::read_le).collect();
    Tensor::new(shape, data).expect("payload length already checked")
}

/// Decodes a whole buffer as a single tensor; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = bytes;
    let t = decode_from(&mut r)?;
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.len())));
    }
    Ok(t)
}

/// Decodes and requires the exact dtype `T`.
pub fn decode_typed<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let any = decode(bytes)?;
    let got = any.dtype();
    match (any, T::DTYPE) {
        (AnyTensor::F32(t), DType::F32) => Ok(t.cast()),
        (AnyTensor::F64(t), DType::F64) => Ok(t.cast()),
        _ => Err(bad(format!("expected dtype {}, found {got}", T::DTYPE))),
    }
}

pub fn save<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(t)?)?;
    w.flush()?;
    Ok(())
}

pub fn load_any(path: &Path) -> Result<AnyTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = decode_from(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad(format!("{}: trailing bytes", path.display())));
    }
    Ok(t)
}

/// Loads a tensor as `f32`; `u8` payloads are scaled by `1/255`.
pub fn load_f32_image(path: &Path) -> Result<Tensor<f32>> {
    match load_any(path)? {
        AnyTensor::F32(t) => Ok(t),
        AnyTensor::U8(raw) => {
            let data = raw.data.iter().map(|&b| f32::from(b) / 255.0).collect();
            Tensor::new(raw.shape, data)
        }
        AnyTensor::F64(_) => Err(bad("f64 image payloads are not supported".to_string())),
    }
}
