//! `HTA1` tensor archives.
//!
//! Layout: the 4 magic bytes `HTA1`, a little-endian `u64` header length,
//! a UTF-8 JSON header mapping tensor names to
//! `{dtype, shape, offset, nbytes}`, then the raw little-endian payload.
//! Offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_str, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HTA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

/// An archive held in memory. Names iterate in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, (EntryHeader, Vec<u8>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn header(&self, name: &str) -> Option<&EntryHeader> {
        self.entries.get(name).map(|(h, _)| h)
    }

    /// Stores a tensor in its native precision.
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(tensor.numel() * T::DTYPE.size());
        for &v in tensor.data() {
            v.write_le(&mut bytes);
        }
        self.insert_raw(name.into(), T::DTYPE, tensor.shape().to_vec(), bytes);
    }

    /// Stores a tensor narrowed to `f32`.
    pub fn insert_f32<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(tensor.numel() * 4);
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        self.insert_raw(name.into(), Dtype::F32, tensor.shape().to_vec(), bytes);
    }

    fn insert_raw(&mut self, name: String, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) {
        let header = EntryHeader {
            dtype,
            shape,
            offset: 0,
            nbytes: bytes.len(),
        };
        self.entries.insert(name, (header, bytes));
    }

    pub fn remove(&mut self, name: &str) -> bool {
        self.entries.remove(name).is_some()
    }

    /// Reads a tensor, widening `f32` payloads exactly.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let (h, bytes) = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Load(format!("archive has no tensor named {name:?}")))?;
        let data: Vec<T> = match h.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::widen_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        Tensor::new(h.shape.clone(), data)
    }

    /// Reads a tensor and checks its shape.
    pub fn get_shaped<T: Scalar>(&self, name: &str, expected: &[usize]) -> Result<Tensor<T>> {
        let h = self
            .header(name)
            .ok_or_else(|| Error::Load(format!("missing tensor {name:?}")))?;
        if h.shape != expected {
            return Err(Error::Load(format!(
                "tensor {name:?} has shape {}, expected {}",
                shape_str(&h.shape),
                shape_str(expected)
            )));
        }
        self.get(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut offset = 0;
        for (name, (h, bytes)) in &self.entries {
            header.insert(
                name.clone(),
                EntryHeader {
                    offset,
                    nbytes: bytes.len(),
                    ..h.clone()
                },
            );
            offset += bytes.len();
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, bytes) in self.entries.values() {
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 {
            return Err(Error::Format(format!(
                "archive is {} bytes, shorter than its preamble",
                buf.len()
            )));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected HTA1".into()));
        }
        let header_len = u64::from_le_bytes(buf[4..12].try_into().expect("8 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "header length {header_len} exceeds file size {}",
                    buf.len()
                ))
            })?;
        let header: BTreeMap<String, EntryHeader> = serde_json::from_slice(&buf[12..header_end])
            .map_err(|e| Error::Format(format!("invalid archive header: {e}")))?;
        let payload = &buf[header_end..];
        let mut entries = BTreeMap::new();
        for (name, h) in header {
            let numel: usize = h.shape.iter().product();
            if numel * h.dtype.size() != h.nbytes {
                return Err(Error::Format(format!(
                    "tensor {name:?}: shape {} with dtype {:?} needs {} bytes, header says {}",
                    shape_str(&h.shape),
                    h.dtype,
                    numel * h.dtype.size(),
                    h.nbytes
                )));
            }
            let end = h
                .offset
                .checked_add(h.nbytes)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "tensor {name:?} spans {}..{} but payload is {} bytes (truncated file?)",
                        h.offset,
                        h.offset.saturating_add(h.nbytes),
                        payload.len()
                    ))
                })?;
            let bytes = payload[h.offset..end].to_vec();
            entries.insert(name, (h, bytes));
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_payload_widens_exactly() {
        let mut a = Archive::new();
        let t = Tensor::<f32>::vector(vec![0.1, -3.25, 1e-7]);
        a.insert("w", &t);
        let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header("w").unwrap().dtype, Dtype::F32);
        let w: Tensor<f64> = back.get("w").unwrap();
        let expect: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
        assert_eq!(w.data(), expect.as_slice());
    }

    #[test]
    fn truncated_file_is_format_error() {
        let mut a = Archive::new();
        a.insert("x", &Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]));
        let bytes = a.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Archive::from_bytes(cut), Err(Error::Format(_))));
        assert!(matches!(
            Archive::from_bytes(&bytes[..6]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = Archive::new().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn layout_matches_documented_format() {
        let mut a = Archive::new();
        a.insert("b", &Tensor::<f64>::vector(vec![2.0]));
        a.insert("a", &Tensor::<f64>::vector(vec![1.0]));
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"HTA1");
        let hl = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(header["a"]["offset"], 0);
        assert_eq!(header["b"]["offset"], 8);
        assert_eq!(header["a"]["dtype"], "f64");
        let payload = &bytes[12 + hl..];
        assert_eq!(f64::from_le_bytes(payload[8..16].try_into().unwrap()), 2.0);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(-1e6f64..1e6, 0..40), cols in 1usize..5) {
            let rows = vals.len() / cols;
            let t = Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let mut a = Archive::new();
            a.insert("t", &t);
            let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.get::<f64>("t").unwrap(), t);
        }
    }
}
