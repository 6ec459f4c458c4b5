//! CUCK checkpoint container: named CUTN tensors in a flat file, with the
//! architecture descriptor stored as a `meta/arch` byte entry so a
//! checkpoint is self-describing.

use crate::backbone::{build_backbone, parse_descriptor, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::cutn::{self, AnyTensor};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fs;
use std::io::Read;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CUCK";
pub const VERSION: u32 = 1;
const ARCH_ENTRY: &str = "meta/arch";

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "CUCK".into(),
        detail: detail.into(),
    }
}

pub fn encode_entries(entries: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let count = u32::try_from(entries.len())
        .map_err(|_| format_err(format!("too many entries: {}", entries.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| format_err(format!("entry name too long: {} bytes", bytes.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.extend_from_slice(&cutn::encode_any(tensor)?);
    }
    Ok(out)
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = bytes;
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| format_err("truncated header"))?;
    if head[0..4] != MAGIC {
        return Err(format_err(format!("bad magic {:?}", &head[0..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)
            .map_err(|_| format_err(format!("truncated name length for entry {i}")))?;
        let len = u16::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(format_err(format!("truncated name for entry {i}")));
        }
        let name = std::str::from_utf8(&r[..len])
            .map_err(|_| format_err(format!("entry {i} name is not UTF-8")))?
            .to_string();
        r = &r[len..];
        let tensor = cutn::decode_from(&mut r)?;
        entries.push((name, tensor));
    }
    if !r.is_empty() {
        return Err(format_err(format!("{} trailing bytes", r.len())));
    }
    Ok(entries)
}

/// Serializes every parameter in insertion order, preceded by the
/// architecture descriptor as a `meta/arch` byte entry.
pub fn save_checkpoint(path: &Path, params: &LayerParams, descriptor: &str) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len() + 1);
    entries.push((
        ARCH_ENTRY.to_string(),
        AnyTensor::U8(crate::tensor::cutn::RawU8 {
            shape: vec![descriptor.len()],
            data: descriptor.as_bytes().to_vec(),
        }),
    ));
    for (name, p) in params.iter() {
        entries.push((name.to_string(), AnyTensor::F32(p.value.clone())));
    }
    fs::write(path, encode_entries(&entries)?)?;
    Ok(())
}

/// Rebuilds the architecture from the stored descriptor, then overwrites
/// every parameter with the stored values. Names and shapes must match the
/// rebuilt net exactly.
pub fn load_checkpoint(path: &Path) -> Result<(LayerParams, BackboneConfig, String)> {
    let bytes = fs::read(path)?;
    let entries = decode_entries(&bytes)?;
    let mut it = entries.into_iter();
    let descriptor = match it.next() {
        Some((name, AnyTensor::U8(raw))) if name == ARCH_ENTRY => {
            String::from_utf8(raw.data)
                .map_err(|_| format_err("architecture descriptor is not UTF-8"))?
        }
        _ => return Err(format_err(format!("first entry must be {ARCH_ENTRY}"))),
    };
    let config = parse_descriptor(&descriptor)?;
    let (mut params, _) = build_backbone(&config, &mut ChaCha12Rng::seed_from_u64(0))?;
    let mut filled = 0usize;
    for (name, tensor) in it {
        let value: Tensor<f32> = match tensor {
            AnyTensor::F32(t) => t,
            other => {
                return Err(format_err(format!(
                    "{name}: expected f32 tensor, got {}",
                    other.dtype()
                )))
            }
        };
        let p = params
            .get_mut(&name)
            .map_err(|_| format_err(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(format_err(format!(
                "{name}: stored shape {:?} vs built shape {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        filled += 1;
    }
    if filled != params.len() {
        return Err(format_err(format!(
            "checkpoint holds {filled} parameters, architecture needs {}",
            params.len()
        )));
    }
    Ok((params, config, descriptor))
}
