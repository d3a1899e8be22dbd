//! Named weight storage and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RDET" | version: u32 | entry count: u32
//! per entry: name length: u16 | UTF-8 name | rank: u8 | dims: u32 * rank | f32 * prod(dims)
//! CRC32 (IEEE) of every preceding byte: u32
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::ops::BatchNormParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RDET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered map from dotted parameter path to tensor (rank 1 to 4).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, StoredTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("invalid weight name `{name}`")));
        }
        if dims.is_empty() || dims.len() > 4 || dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Config(format!("weight `{name}` has unsupported dims {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Config(format!(
                "weight `{name}` dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate weight `{name}`")));
        }
        self.entries.insert(name, StoredTensor { dims, data });
        Ok(())
    }

    pub(crate) fn put_tensor(&mut self, name: String, t: &Tensor) {
        let dims = t.shape().dims().to_vec();
        self.insert(name, dims, t.data().to_vec()).expect("tensor export");
    }

    pub(crate) fn put_vec(&mut self, name: String, v: &[f32]) {
        self.insert(name, vec![v.len()], v.to_vec()).expect("vector export");
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(StoredTensor::numel).sum()
    }

    /// Names, dims and raw bit patterns all equal.
    pub fn bit_identical(&self, other: &WeightStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.dims == b.dims
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.scalar_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(Error::Malformed(format!("file is only {} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut cur = Cursor { buf: body, pos: 12 };
        let count = u32::from_le_bytes(body[8..12].try_into().unwrap());
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Malformed("weight name is not UTF-8".into()))?
                .to_string();
            let rank = cur.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("dims of `{name}` overflow")))?;
            let raw = cur.take(numel.checked_mul(4).ok_or_else(|| Error::Malformed("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store
                .insert(name, dims, data)
                .map_err(|e| Error::Malformed(e.to_string()))?;
        }
        if cur.pos != body.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last entry",
                body.len() - cur.pos
            )));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&std::fs::read(path)?)
}

/// What a requested parameter is, so initializers can treat it sensibly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: Role,
}

/// Hands out parameters to model constructors and checks that every stored
/// name is consumed exactly once.
///
/// A reader without a store ("schema mode") returns zeros and records every
/// request, which yields the full parameter list of a configuration.
pub struct WeightReader<'a> {
    store: Option<&'a WeightStore>,
    consumed: BTreeSet<String>,
    requested: Vec<ParamSpec>,
}

impl<'a> WeightReader<'a> {
    pub fn new(store: &'a WeightStore) -> Self {
        Self {
            store: Some(store),
            consumed: BTreeSet::new(),
            requested: Vec::new(),
        }
    }

    pub fn schema() -> Self {
        Self {
            store: None,
            consumed: BTreeSet::new(),
            requested: Vec::new(),
        }
    }

    /// Whether the store holds `name`. Always false in schema mode, so
    /// constructors fall back to the unfused layout.
    pub fn contains(&self, name: &str) -> bool {
        self.store.is_some_and(|s| s.contains(name))
    }

    pub fn take(&mut self, name: &str, dims: &[usize], role: Role) -> Result<Vec<f32>> {
        if !self.consumed.insert(name.to_string()) {
            return Err(Error::Config(format!("weight `{name}` requested twice")));
        }
        self.requested.push(ParamSpec {
            name: name.to_string(),
            dims: dims.to_vec(),
            role,
        });
        let Some(store) = self.store else {
            return Ok(vec![0.0; dims.iter().product()]);
        };
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if t.dims != dims {
            return Err(Error::WeightShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t.data.clone())
    }

    pub fn take_tensor(&mut self, name: &str, dims: [usize; 4]) -> Result<Tensor> {
        let data = self.take(name, &dims, Role::ConvWeight)?;
        Tensor::from_dims(dims[0], dims[1], dims[2], dims[3], data)
    }

    pub fn take_bn(&mut self, prefix: &str, c: usize, eps: f32) -> Result<BatchNormParams> {
        let gamma = self.take(&format!("{prefix}.weight"), &[c], Role::BnGamma)?;
        let beta = self.take(&format!("{prefix}.bias"), &[c], Role::BnBeta)?;
        let mean = self.take(&format!("{prefix}.running_mean"), &[c], Role::BnMean)?;
        let var = self.take(&format!("{prefix}.running_var"), &[c], Role::BnVar)?;
        BatchNormParams::new(gamma, beta, mean, var, eps).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("`{prefix}`: {msg}")),
            other => other,
        })
    }

    /// Fails if the store holds names nobody asked for; returns the list of
    /// parameters that were requested.
    pub fn finish(self) -> Result<Vec<ParamSpec>> {
        if let Some(store) = self.store {
            let unused: Vec<String> = store
                .iter()
                .map(|(k, _)| k)
                .filter(|k| !self.consumed.contains(*k))
                .map(str::to_string)
                .collect();
            if !unused.is_empty() {
                return Err(Error::UnusedWeights(unused));
            }
        }
        Ok(self.requested)
    }
}

pub(crate) fn export_conv(store: &mut WeightStore, prefix: &str, conv: &ConvParams) {
    store.put_tensor(format!("{prefix}.weight"), &conv.weight);
    if let Some(b) = &conv.bias {
        store.put_vec(format!("{prefix}.bias"), b);
    }
}

pub(crate) fn export_bn(store: &mut WeightStore, prefix: &str, bn: &BatchNormParams) {
    store.put_vec(format!("{prefix}.weight"), &bn.gamma);
    store.put_vec(format!("{prefix}.bias"), &bn.beta);
    store.put_vec(format!("{prefix}.running_mean"), &bn.running_mean);
    store.put_vec(format!("{prefix}.running_var"), &bn.running_var);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.weight", vec![2, 1, 1, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, -0.0, 7.0])
            .unwrap();
        s.insert("a.bias", vec![2], vec![0.25, -0.5]).unwrap();
        s
    }

    #[test]
    fn empty_store_is_sixteen_bytes() {
        let bytes = WeightStore::new().to_bytes();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"RDET");
        assert!(WeightStore::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadVersion(9))));

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::Checksum { .. })));

        for cut in [5, 15, bytes.len() - 1] {
            assert!(WeightStore::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn reader_reports_missing_shape_and_unused() {
        let store = sample();
        let mut r = WeightReader::new(&store);
        assert!(matches!(r.take("nope", &[1], Role::Bias), Err(Error::MissingWeight(n)) if n == "nope"));
        assert!(matches!(r.take("a.bias", &[3], Role::Bias), Err(Error::WeightShape { .. })));

        let mut r = WeightReader::new(&store);
        r.take("a.bias", &[2], Role::Bias).unwrap();
        assert!(matches!(r.finish(), Err(Error::UnusedWeights(v)) if v == ["a.weight"]));
    }

    #[test]
    fn insert_validates() {
        let mut s = WeightStore::new();
        assert!(s.insert("x", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(s.insert("x", vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        s.insert("x", vec![1], vec![0.0]).unwrap();
        assert!(s.insert("x", vec![1], vec![0.0]).is_err());
    }
}
