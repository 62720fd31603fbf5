//! Binary checkpoint format.
//!
//! ```text
//! "PPCL" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 | ndim: u32 | dims: u64 * ndim | data: f64 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Parameter groups are not stored;
//! a parameter's group is the part of its name before the first `.`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PPCL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!(
                "record {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len() - r.pos))
            .ok_or_else(|| Error::Checkpoint(format!("record {name}: shape {shape:?} overruns file")))?;
        let data = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(records))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

/// Records for every parameter in `store` whose group is listed (all when empty).
pub fn store_records(store: &ParamStore, groups: &[&str]) -> Vec<Record> {
    store
        .entries()
        .filter(|(_, g, _)| groups.is_empty() || groups.contains(g))
        .map(|(name, _, t)| Record {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

/// Group implied by a parameter name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Copies records into `store`: existing names are overwritten in place
/// (shapes must match), new names are appended. Names in `skip_prefixes` are ignored.
pub fn load_into(store: &mut ParamStore, records: &[Record], skip_prefixes: &[&str]) -> Result<()> {
    for r in records {
        if skip_prefixes.iter().any(|p| r.name.starts_with(p)) {
            continue;
        }
        match store.find(&r.name) {
            Some(id) => {
                let t = store.get_mut(id);
                if t.shape() != r.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "{}: stored shape {:?} vs expected {:?}",
                        r.name,
                        r.shape,
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&r.data);
            }
            None => {
                store.add(
                    r.name.clone(),
                    group_of(&r.name),
                    Tensor::new(r.shape.clone(), r.data.clone())?,
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn record() -> impl Strategy<Value = Record> {
        ("[a-z.]{1,12}", prop::collection::vec(0usize..4, 0..3)).prop_flat_map(|(name, shape)| {
            let n = shape.iter().product::<usize>();
            prop::collection::vec(any::<f64>(), n)
                .prop_map(move |data| Record::new(name.clone(), shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(records in prop::collection::vec(record(), 0..6)) {
            let back = decode(&encode(&records)).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.data), bits(&b.data));
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[Record::vector("x", vec![1.5])]);
        assert_eq!(&bytes[..4], b"PPCL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'x');
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[25..33].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
        assert!(decode(b"PPCL\x02\0\0\0").is_err());
        let bytes = encode(&[Record::vector("abc", vec![1.0, 2.0])]);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn store_round_trip_through_file() {
        let mut s = ParamStore::new();
        s.add("pool.keys", "pool", Tensor::new(vec![2, 2], vec![0.1, -0.2, 1e-300, 3.0]).unwrap());
        s.add("output.proj", "output", Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        write(&path, &store_records(&s, &[])).unwrap();

        let mut fresh = ParamStore::new();
        load_into(&mut fresh, &read(&path).unwrap(), &[]).unwrap();
        assert_eq!(fresh.checksums(&[]), s.checksums(&[]));
        assert_eq!(fresh.group(fresh.find("pool.keys").unwrap()), "pool");

        let only_pool = store_records(&s, &["pool"]);
        assert_eq!(only_pool.len(), 1);
        let bad = vec![Record::vector("pool.keys", vec![1.0])];
        assert!(load_into(&mut fresh, &bad, &[]).is_err());
    }
}
