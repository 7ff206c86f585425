use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameter name → gradient (or update) tensor.
pub type GradMap = BTreeMap<String, Tensor>;

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"ENTAILKIT-CKPT-1";

/// Named model parameters plus the seed they were initialized from.
///
/// Names iterate in sorted order, which keeps initialization, optimizer
/// updates and checkpoints deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

/// Seeded parameter initializer. Each call draws from a stream keyed by the
/// parameter name, so adding a parameter never shifts the others.
pub struct Init {
    seed: u64,
}

fn name_key(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(name_key(self.seed, name))
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
    }

    /// Glorot-uniform init for a `[fan_in, fan_out]` weight.
    pub fn xavier(&self, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
        let mut rng = self.rng(name);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape")
    }
}

impl ParamSet {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn init(&self) -> Init {
        Init::new(self.rng_seed)
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Merges another set into this one, failing on name collisions.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.params {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Writes the checkpoint archive.
    ///
    /// Layout (little-endian): magic, `u64` seed, `u32` count, then per
    /// parameter `u32` name length, UTF-8 name, `u32` rank, `u64` dims,
    /// `f64` payload. Parameters are written in name order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.rng_seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated archive: {e}")))?;
            Ok(buf)
        }
        let magic: [u8; 16] = take(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let seed = u64::from_le_bytes(take(&mut r)?);
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut set = ParamSet::new(seed);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
            let rank = u32::from_le_bytes(take(&mut r)?) as usize;
            let shape = (0..rank)
                .map(|_| take::<8>(&mut r).map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| take::<8>(&mut r).map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            set.insert(name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = ParamSet::new(42);
        let init = p.init();
        p.insert("a.w", init.normal("a.w", &[3, 4], 1.0)).unwrap();
        p.insert("b", Tensor::row(vec![f64::MIN_POSITIVE, -0.0, 1e300])).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..16], b"ENTAILKIT-CKPT-1");
        let back = ParamSet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.rng_seed(), 42);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::new(1);
        p.insert("x", Tensor::scalar(1.0)).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert!(ParamSet::read_checkpoint(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(matches!(
            ParamSet::read_checkpoint(buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new(0);
        p.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(p.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn init_is_keyed_by_name() {
        let a = Init::new(7).normal("x", &[4], 1.0);
        let b = Init::new(7).normal("x", &[4], 1.0);
        let c = Init::new(7).normal("y", &[4], 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
