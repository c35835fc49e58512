//! Binary tensor container.
//!
//! Layout (little-endian): magic `MOLEARC1`, u32 entry count, then per entry a
//! u32 name length, the UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! `rank` u64 dims and the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOLEARC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: Vec<Entry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Archive(format!("missing entry `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::from(&MAGIC[..]);
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Archive("too many entries".into()))?;
        out.extend(count.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name);
            out.push(e.dtype.code());
            let shape = e.tensor.shape();
            out.push(
                u8::try_from(shape.len())
                    .map_err(|_| Error::Archive(format!("rank of `{}` exceeds 255", e.name)))?,
            );
            for &d in shape {
                out.extend((d as u64).to_le_bytes());
            }
            match e.dtype {
                DType::F32 => e.tensor.data().iter().for_each(|&v| out.extend((v as f32).to_le_bytes())),
                DType::F64 => e.tensor.data().iter().for_each(|&v| out.extend(v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Archive("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                c => return Err(Error::Archive(format!("`{name}`: unknown dtype {c}"))),
            };
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Archive(format!("`{name}`: shape overflows")))?;
            let raw = r.take(
                n.checked_mul(dtype.width())
                    .ok_or_else(|| Error::Archive(format!("`{name}`: payload overflows")))?,
            )?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Archive(format!("`{name}`: {e}")))?;
            entries.push(Entry { name, dtype, tensor });
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(TensorArchive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
    }

    /// Every tensor in `store` whose name starts with `prefix`.
    pub fn from_store(store: &ParamStore, prefix: &str, dtype: DType) -> Self {
        let mut a = TensorArchive::new();
        for (name, t) in store.with_prefix(prefix) {
            let mut t = t.clone();
            t.grad = None;
            t.requires_grad = false;
            a.push(name, dtype, t);
        }
        a
    }

    /// Overwrite values of existing parameters, checking shapes; keeps trainability flags.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for e in &self.entries {
            let t = store.get_mut(&e.name)?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Archive(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    e.name,
                    e.tensor.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(e.tensor.data());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push("w", DType::F64, Tensor::randn(vec![2, 3], 1.0, 1, "w"));
        a.push("b", DType::F32, Tensor::new(vec![2], vec![0.5, -1.25]).unwrap());
        a.push("s", DType::F64, Tensor::new(Vec::<usize>::new(), vec![7.0]).unwrap());
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn f32_entries_widen() {
        let mut a = TensorArchive::new();
        a.push("x", DType::F32, Tensor::new(vec![1], vec![0.1]).unwrap());
        let back = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back.get("x").unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorArchive::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(TensorArchive::from_bytes(&extra).is_err());
    }

    #[test]
    fn load_into_checks_shapes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![3, 2]));
        let mut a = TensorArchive::new();
        a.push("w", DType::F64, Tensor::zeros(vec![2, 3]));
        assert!(a.load_into(&mut store).is_err());
        let mut a = TensorArchive::new();
        a.push("v", DType::F64, Tensor::zeros(vec![1]));
        assert!(a.load_into(&mut store).is_err());
    }
}
