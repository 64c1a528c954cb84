//! Little-endian tensor blob store.
//!
//! Layout:
//!
//! ```text
//! "CTSB"            4 bytes magic
//! version           u32 (= 1)
//! count             u32
//! per tensor:
//!   name length     u16
//!   name            UTF-8 bytes
//!   rank            u8
//!   dims            rank × u64
//!   values          product(dims) × f32
//! ```

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTSB";
pub const BLOB_VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBlobStore {
    tensors: IndexMap<String, Tensor>,
}

impl TensorBlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; a duplicate name is a shape-level error.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Blob {
                offset: 0,
                message: format!("duplicate tensor name `{name}`"),
            });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Blob {
                offset: 0,
                message: "bad magic, expected \"CTSB\"".into(),
            });
        }
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: BLOB_VERSION,
            });
        }
        let count = r.u32()?;
        let mut store = TensorBlobStore::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| r.err(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64()?;
                let d = usize::try_from(d).map_err(|_| r.err(format!("dimension {d} too large")))?;
                dims.push(d);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.err("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(dims, data).map_err(|e| Error::Blob {
                offset: at,
                message: format!("tensor `{name}`: {e}"),
            })?;
            store.insert(name, tensor).map_err(|e| match e {
                Error::Blob { message, .. } => Error::Blob { offset: at, message },
                other => other,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

impl FromIterator<(String, Tensor)> for TensorBlobStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorBlobStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: String) -> Error {
        Error::Blob {
            offset: self.pos,
            message,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err(format!("unexpected end of data reading {n} bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_byte_layout() {
        let mut s = TensorBlobStore::new();
        s.insert("w", Tensor::new([2], vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = s.to_bytes();
        let mut expect = b"CTSB".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u16.to_le_bytes());
        expect.push(b'w');
        expect.push(1);
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let mut s = TensorBlobStore::new();
        s.insert("a", Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let bytes = s.to_bytes();
        for cut in [0, 3, 8, 13, bytes.len() - 1] {
            assert!(TensorBlobStore::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorBlobStore::from_bytes(&bad).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(TensorBlobStore::from_bytes(&trailing).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros([1]).unwrap();
        let store: TensorBlobStore = [("x".to_string(), t.clone())].into_iter().collect();
        let mut bytes = store.to_bytes();
        // bump the count and append the same record again
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let record = bytes[12..].to_vec();
        bytes.extend(record);
        let err = TensorBlobStore::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    fn arb_store() -> impl Strategy<Value = TensorBlobStore> {
        let tensor = proptest::collection::vec(1usize..4, 1..4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            proptest::collection::vec(any::<f32>(), n).prop_map(move |d| Tensor::new(dims.clone(), d).unwrap())
        });
        proptest::collection::vec(("[a-z.]{1,12}", tensor), 0..5).prop_map(|items| {
            let mut s = TensorBlobStore::new();
            for (name, t) in items {
                let _ = s.insert(name, t);
            }
            s
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(store in arb_store()) {
            let back = TensorBlobStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(back.len(), store.len());
            for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.dims(), t2.dims());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
