//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"ECLMCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      8     header length H in bytes (u64)
//! 20      H     UTF-8 JSON header: {"meta": <any>, "tensors": [{"name", "shape"}]}
//! 20+H    8·P   tensor data, f64 little-endian, concatenated in header order
//! ```
//!
//! `P` is the total element count. Values are stored bit-exactly, so a
//! checkpoint read back and written again is byte-identical.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"ECLMCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Fixed bytes before the JSON header.
pub const PREAMBLE_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let elems: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(PREAMBLE_BYTES + header.len() + 8 * elems);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_BYTES || &bytes[..8] != MAGIC {
            return Err(Error::Format("not an ECLM checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = PREAMBLE_BYTES
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE_BYTES..body])?;
        let mut cursor = body;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = cursor + 8 * n;
            if end > bytes.len() {
                return Err(Error::Format(format!("truncated data for tensor {}", entry.name)));
            }
            let data = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if cursor != bytes.len() {
            return Err(Error::Format("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_bit_exactly(
            data in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 0..40),
            tag in "[a-z]{1,8}",
        ) {
            let n = data.len();
            let ckpt = Checkpoint {
                meta: serde_json::json!({ "tag": tag, "x": 0.1 }),
                tensors: vec![("a".into(), Tensor::vector(data)), ("s".into(), Tensor::scalar(-0.0))],
            };
            let bytes = ckpt.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            let a = back.tensor("a").unwrap();
            prop_assert_eq!(a.len(), n);
            for (x, y) in a.data().iter().zip(ckpt.tensors[0].1.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
        let ok = Checkpoint {
            meta: Value::Null,
            tensors: vec![("a".into(), Tensor::vector(vec![1.0, 2.0]))],
        }
        .to_bytes()
        .unwrap();
        assert!(Checkpoint::from_bytes(&ok[..ok.len() - 3]).is_err());
    }

    #[test]
    fn size_is_preamble_header_and_eight_bytes_per_value() {
        let ckpt = Checkpoint {
            meta: Value::Null,
            tensors: vec![("w".into(), Tensor::zeros(&[3, 4]))],
        };
        let bytes = ckpt.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), PREAMBLE_BYTES + hlen + 8 * 12);
    }
}
