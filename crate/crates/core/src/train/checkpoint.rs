//! Checkpoint container: magic `MARLCKPT`, a u32 version, self-delimiting
//! named records (name, dtype code, rank, u64 extents, raw little-endian
//! values), and a trailing u64 record count for integrity.

use std::path::Path;

use crate::autodiff::{Dtype, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MARLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn dtype_code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U64(_) => 2,
            Payload::Bytes(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }

    pub fn scalars<S: Scalar>(&self) -> Option<Vec<S>> {
        match (self, S::DTYPE) {
            (Payload::F32(v), Dtype::F32) => {
                Some(v.iter().map(|&x| S::from_f64(x as f64)).collect())
            }
            (Payload::F64(v), Dtype::F64) => Some(v.iter().map(|&x| S::from_f64(x)).collect()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn scalar_tensor<S: Scalar>(name: &str, shape: &[usize], values: &[S]) -> Record {
        let payload = match S::DTYPE {
            Dtype::F32 => Payload::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            Dtype::F64 => Payload::F64(values.iter().map(|v| v.as_f64()).collect()),
        };
        Record {
            name: name.to_string(),
            shape: shape.to_vec(),
            payload,
        }
    }

    pub fn u64_scalar(name: &str, value: u64) -> Record {
        Record {
            name: name.to_string(),
            shape: vec![1],
            payload: Payload::U64(vec![value]),
        }
    }

    pub fn f64_scalar(name: &str, value: f64) -> Record {
        Record {
            name: name.to_string(),
            shape: vec![1],
            payload: Payload::F64(vec![value]),
        }
    }

    pub fn bytes(name: &str, value: Vec<u8>) -> Record {
        Record {
            name: name.to_string(),
            shape: vec![value.len()],
            payload: Payload::Bytes(value),
        }
    }
}

#[derive(Debug, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn u64_value(&self, name: &str) -> Option<u64> {
        match self.get(name)?.payload {
            Payload::U64(ref v) => v.first().copied(),
            _ => None,
        }
    }

    pub fn f64_value(&self, name: &str) -> Option<f64> {
        match self.get(name)?.payload {
            Payload::F64(ref v) => v.first().copied(),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.payload.dtype_code());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            debug_assert_eq!(r.shape.iter().product::<usize>(), r.payload.len());
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |msg: String| Error::Format(msg);
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(Error::Integrity("file shorter than header".to_string()));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("bad magic".to_string()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let mut pos = 12usize;
        let body_end = bytes.len() - 8;
        let mut records = Vec::new();
        while pos < body_end {
            let need = |p: usize, n: usize| -> Result<()> {
                if p + n > body_end {
                    Err(Error::Integrity(format!(
                        "truncated record at byte {p} (need {n} more)"
                    )))
                } else {
                    Ok(())
                }
            };
            need(pos, 4)?;
            let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            need(pos, name_len)?;
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|e| fail(format!("record name not UTF-8: {e}")))?
                .to_string();
            pos += name_len;
            need(pos, 5)?;
            let dtype = bytes[pos];
            pos += 1;
            let rank = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            need(pos, rank * 8)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
                pos += 8;
            }
            let numel: usize = shape.iter().product();
            let width = match dtype {
                0 => 4,
                1 | 2 => 8,
                3 => 1,
                other => return Err(fail(format!("unknown dtype code {other} in `{name}`"))),
            };
            need(pos, numel * width)?;
            let raw = &bytes[pos..pos + numel * width];
            pos += numel * width;
            let payload = match dtype {
                0 => Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => Payload::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => Payload::Bytes(raw.to_vec()),
            };
            records.push(Record {
                name,
                shape,
                payload,
            });
        }
        let count = u64::from_le_bytes(bytes[body_end..].try_into().unwrap()) as usize;
        if count != records.len() {
            return Err(Error::Integrity(format!(
                "record count {count} does not match {} parsed records",
                records.len()
            )));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            records: vec![
                Record::scalar_tensor::<f32>("param/w", &[2, 3], &[1.0, 2.5, -3.0, 0.0, 9.9, 4.2]),
                Record::u64_scalar("meta/step", 77),
                Record::f64_scalar("meta/auc", 0.9125),
                Record::bytes("config", b"{\"seed\":1}".to_vec()),
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.records, back.records);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 12];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::Integrity(_)) | Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_trailer_count_is_caught() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&99u64.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Integrity(_))
        ));
    }
}
