//! The binary tensor container shared by datasets and checkpoints:
//! magic "PUMT", u32 LE version (=1), u8 dtype (0 = f32, 1 = f64,
//! 2 = i8), u8 ndim, ndim u64 LE dimension sizes, then the row-major
//! little-endian payload. No padding between fields.

use std::fs;
use std::path::Path;

use crate::errors::{validation, CliResult};

pub const MAGIC: &[u8; 4] = b"PUMT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum PumtData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
}

impl PumtData {
    pub fn len(&self) -> usize {
        match self {
            PumtData::F32(v) => v.len(),
            PumtData::F64(v) => v.len(),
            PumtData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            PumtData::F32(_) => 0,
            PumtData::F64(_) => 1,
            PumtData::I8(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pumt {
    pub shape: Vec<usize>,
    pub data: PumtData,
}

impl Pumt {
    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            shape,
            data: PumtData::F64(values),
        }
    }

    pub fn i8(shape: Vec<usize>, values: Vec<i8>) -> Self {
        Self {
            shape,
            data: PumtData::I8(values),
        }
    }

    pub fn as_f64(&self) -> CliResult<&[f64]> {
        match &self.data {
            PumtData::F64(v) => Ok(v),
            other => Err(validation(format!(
                "expected f64 payload, found dtype {}",
                other.dtype_code()
            ))),
        }
    }

    pub fn as_i8(&self) -> CliResult<&[i8]> {
        match &self.data {
            PumtData::I8(v) => Ok(v),
            other => Err(validation(format!(
                "expected i8 payload, found dtype {}",
                other.dtype_code()
            ))),
        }
    }
}

fn header_len(ndim: usize) -> usize {
    4 + 4 + 1 + 1 + 8 * ndim
}

pub fn encode(t: &Pumt) -> CliResult<Vec<u8>> {
    let numel: usize = t.shape.iter().product();
    if t.shape.is_empty() || t.shape.len() > u8::MAX as usize {
        return Err(validation(format!(
            "container rank must be 1..=255, got {}",
            t.shape.len()
        )));
    }
    if numel != t.data.len() {
        return Err(validation(format!(
            "shape {:?} holds {numel} elements, payload has {}",
            t.shape,
            t.data.len()
        )));
    }
    let mut out = Vec::with_capacity(header_len(t.shape.len()) + 8 * numel);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.data.dtype_code());
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        PumtData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        PumtData::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        PumtData::I8(v) => {
            for x in v {
                out.push(*x as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CliResult<Pumt> {
    if bytes.len() < header_len(0) {
        return Err(validation("container shorter than its fixed header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(validation("bad magic; not a PUMT container"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(validation(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let dtype = bytes[8];
    let ndim = bytes[9] as usize;
    if ndim == 0 {
        return Err(validation("container rank must be at least 1"));
    }
    let head = header_len(ndim);
    if bytes.len() < head {
        return Err(validation("container truncated inside the dimension list"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 10 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| validation("dimension overflows usize"))?);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[head..];
    let data = match dtype {
        0 => {
            if payload.len() != 4 * numel {
                return Err(validation(format!(
                    "f32 payload is {} bytes, shape {shape:?} needs {}",
                    payload.len(),
                    4 * numel
                )));
            }
            PumtData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        1 => {
            if payload.len() != 8 * numel {
                return Err(validation(format!(
                    "f64 payload is {} bytes, shape {shape:?} needs {}",
                    payload.len(),
                    8 * numel
                )));
            }
            PumtData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        2 => {
            if payload.len() != numel {
                return Err(validation(format!(
                    "i8 payload is {} bytes, shape {shape:?} needs {numel}",
                    payload.len()
                )));
            }
            PumtData::I8(payload.iter().map(|&b| b as i8).collect())
        }
        other => return Err(validation(format!("unknown dtype code {other}"))),
    };
    Ok(Pumt { shape, data })
}

/// CRC32 of the payload section (everything after the header), as stored
/// in dataset manifests.
pub fn payload_crc32(encoded: &[u8]) -> CliResult<u32> {
    if encoded.len() < header_len(0) || &encoded[..4] != MAGIC {
        return Err(validation("not a PUMT container"));
    }
    let ndim = encoded[9] as usize;
    let head = header_len(ndim);
    if encoded.len() < head {
        return Err(validation("container truncated inside the dimension list"));
    }
    Ok(crc32fast::hash(&encoded[head..]))
}

pub fn write_file(path: &Path, t: &Pumt) -> CliResult<u32> {
    let bytes = encode(t)?;
    let crc = payload_crc32(&bytes)?;
    fs::write(path, bytes)?;
    Ok(crc)
}

pub fn read_file(path: &Path) -> CliResult<(Pumt, u32)> {
    let bytes = fs::read(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let t = decode(&bytes)?;
    let crc = payload_crc32(&bytes)?;
    Ok((t, crc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_exact() {
        let t = Pumt::f64(vec![2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0]);
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.shape, vec![2, 3]);
        let vals = back.as_f64().unwrap();
        for (a, b) in t.as_f64().unwrap().iter().zip(vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn i8_round_trip_preserves_negative_labels() {
        let t = Pumt::i8(vec![4], vec![-1, 0, 1, -1]);
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.as_i8().unwrap(), &[-1, 0, 1, -1]);
    }

    #[test]
    fn f32_round_trip() {
        let t = Pumt {
            shape: vec![3],
            data: PumtData::F32(vec![1.0, -2.5, 3.25]),
        };
        let bytes = encode(&t).unwrap();
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn header_layout_is_byte_exact() {
        let t = Pumt::i8(vec![2], vec![5, -5]);
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"PUMT");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8], 2); // i8 dtype
        assert_eq!(bytes[9], 1); // ndim
        assert_eq!(bytes[10..18], 2u64.to_le_bytes());
        assert_eq!(&bytes[18..], &[5u8, 0xFB]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let t = Pumt::f64(vec![1], vec![1.0]);
        let mut bytes = encode(&t).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Pumt::f64(vec![2], vec![1.0, 2.0]);
        let mut bytes = encode(&t).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let t = Pumt::f64(vec![1], vec![1.0]);
        let mut bytes = encode(&t).unwrap();
        bytes[8] = 9;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn crc_covers_payload_only() {
        let a = Pumt::f64(vec![1, 2], vec![1.0, 2.0]);
        let b = Pumt::f64(vec![2, 1], vec![1.0, 2.0]);
        let ea = encode(&a).unwrap();
        let eb = encode(&b).unwrap();
        // same payload bytes, different shapes: same payload checksum
        assert_eq!(payload_crc32(&ea).unwrap(), payload_crc32(&eb).unwrap());
        assert_ne!(ea, eb);
    }
}
