//! DIPAW1 container: 8-byte magic, little-endian u64 header length, JSON
//! header `{name: {dtype, shape, offset, nbytes}}`, then the payload.
//! Offsets are relative to the payload start; tensors are row-major LE.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnyTensor, WeightContainer};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 8] = *b"DIPAW1\0\0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

pub fn write_container(c: &WeightContainer) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in c.iter() {
        let offset = payload.len() as u64;
        t.write_le(&mut payload);
        header.insert(
            name.to_string(),
            Entry {
                dtype: t.dtype().name().to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            },
        );
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn read_container(bytes: &[u8]) -> Result<WeightContainer, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated(format!("{} bytes, no room for magic", bytes.len())));
    }
    let magic: [u8; 8] = bytes[..8].try_into().expect("8 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < 16 {
        return Err(FormatError::Truncated("missing header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hend = 16u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| FormatError::Truncated(format!("header of {hlen} bytes exceeds file")))? as usize;
    let header: BTreeMap<String, Entry> =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| FormatError::Header(e.to_string()))?;
    let payload = &bytes[hend..];
    let mut out = WeightContainer::new();
    for (name, entry) in header {
        let dtype = match entry.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(FormatError::UnknownDtype(other.to_string())),
        };
        let integrity = |detail: String| FormatError::Integrity { name: name.clone(), detail };
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(integrity(format!("invalid shape {:?}", entry.shape)));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| integrity("shape overflows".into()))?;
        let expect = (numel as u64).checked_mul(dtype.size() as u64);
        if expect != Some(entry.nbytes) {
            return Err(integrity(format!(
                "nbytes {} but shape {:?} of {} needs {}",
                entry.nbytes,
                entry.shape,
                dtype.name(),
                numel * dtype.size()
            )));
        }
        let end = entry.offset.checked_add(entry.nbytes).filter(|&e| e <= payload.len() as u64).ok_or_else(|| {
            FormatError::Truncated(format!(
                "`{name}` spans {}..{} but payload has {} bytes",
                entry.offset,
                entry.offset.saturating_add(entry.nbytes),
                payload.len()
            ))
        })? as usize;
        let raw = &payload[entry.offset as usize..end];
        let t = match dtype {
            DType::F32 => AnyTensor::F32(decode::<f32>(raw, entry.shape)),
            DType::F64 => AnyTensor::F64(decode::<f64>(raw, entry.shape)),
        };
        out.insert(name, t);
    }
    Ok(out)
}

fn decode<T: Scalar>(raw: &[u8], shape: Vec<usize>) -> Tensor<T> {
    let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_parts_unchecked(shape, data)
}

pub fn save_weights(c: &WeightContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_container(c)).map_err(|e| Error::io_at(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    Ok(read_container(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_random_weights, BackboneConfig, InitScheme};
    use crate::tensor::Rng;

    fn sample() -> WeightContainer {
        let mut c =
            init_random_weights(&BackboneConfig::tiny(), &mut Rng::new(5), InitScheme::default(), DType::F32).unwrap();
        c.insert(
            "extra.f64",
            AnyTensor::F64(Tensor::from_f64(vec![2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
        );
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = write_container(&c);
        let back = read_container(&bytes).unwrap();
        assert_eq!(write_container(&back), bytes);
        for (name, t) in c.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.dtype(), u.dtype());
            match (t, u) {
                (AnyTensor::F32(a), AnyTensor::F32(b)) => {
                    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
                }
                (AnyTensor::F64(a), AnyTensor::F64(b)) => {
                    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dipaw");
        let c = sample();
        save_weights(&c, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), c);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = write_container(&sample());
        bytes[0] = b'X';
        assert!(matches!(read_container(&bytes), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = write_container(&sample());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_container(cut), Err(FormatError::Truncated(_))));
        assert!(matches!(read_container(&bytes[..12]), Err(FormatError::Truncated(_))));
    }

    fn with_header(edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let bytes = write_container(&sample());
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        edit(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + hlen..]);
        out
    }

    #[test]
    fn nbytes_disagreeing_with_shape() {
        let bytes = with_header(|h| h["extra.f64"]["nbytes"] = 24.into());
        assert!(matches!(read_container(&bytes), Err(FormatError::Integrity { .. })));
        let bytes = with_header(|h| h["extra.f64"]["shape"] = serde_json::json!([3, 2]));
        assert!(matches!(read_container(&bytes), Err(FormatError::Integrity { .. })));
    }

    #[test]
    fn unknown_dtype() {
        let bytes = with_header(|h| h["extra.f64"]["dtype"] = "bf16".into());
        assert_eq!(read_container(&bytes).unwrap_err(), FormatError::UnknownDtype("bf16".into()));
    }

    #[test]
    fn malformed_header() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(b"{x}");
        assert!(matches!(read_container(&bytes), Err(FormatError::Header(_))));
    }
}
