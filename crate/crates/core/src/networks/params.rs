//! Named parameter tensors with gradient slots, and the checkpoint format.
//!
//! Checkpoint layout: `OLDM`, `u32` version (1), `u32` tensor count, then per
//! tensor a `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! little-endian `f32` values. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{config_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OLDM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform on `±bound`.
    Uniform(f64),
}

impl Init {
    /// `±sqrt(1 / fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform((1.0 / fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-valued parameter; call [`ParamStore::initialize`] to draw values.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.entries.contains_key(name) {
            return config_err(format!("duplicate parameter `{name}`"));
        }
        let value = Tensor::zeros(shape);
        let grad = Tensor::zeros(shape);
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad, init });
        Ok(())
    }

    /// Draws every parameter from its init rule, in name order.
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for entry in self.entries.values_mut() {
            match entry.init {
                Init::Zeros => entry.value.data.iter_mut().for_each(|v| *v = 0.0),
                Init::Uniform(b) => entry
                    .value
                    .data
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-b..=b)),
            }
        }
    }

    /// Overwrites every value, including zero-initialized ones, with `U(±scale)`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for entry in self.entries.values_mut() {
            entry
                .value
                .data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..=scale));
        }
    }

    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, entry) in other.entries {
            if self.entries.contains_key(&name) {
                return config_err(format!("duplicate parameter `{name}`"));
            }
            self.entries.insert(name, entry);
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Records the named parameter as a graph leaf.
    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `scale * grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads {
            let entry = self.entries.get_mut(name).ok_or_else(|| {
                Error::Checkpoint(format!("gradient for unknown parameter `{name}`"))
            })?;
            if entry.grad.shape != g.shape {
                return config_err(format!("gradient shape mismatch for `{name}`"));
            }
            for (a, b) in entry.grad.data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    /// Rounds every value to `f32`, matching what a checkpoint round trip yields.
    pub fn quantize_f32(&mut self) {
        for e in self.entries.values_mut() {
            e.value.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.value.shape.len() as u32).to_le_bytes());
            for &d in &e.value.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.value.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("checkpoint magic mismatch".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store
                .add(&name, &shape, Init::Zeros)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.entries.get_mut(&name).unwrap().value = Tensor::new(shape, data);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies values for every name present in both stores; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let src = other.get(name)?;
            if src.shape != e.value.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, expected {:?}",
                    src.shape, e.value.shape
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", &[2, 3], Init::fan_in(3)).unwrap();
        s.add("a.b", &[3], Init::Zeros).unwrap();
        s.initialize(&mut ChaCha8Rng::seed_from_u64(1));
        s
    }

    #[test]
    fn init_rules() {
        let s = store();
        let bound = (1.0f64 / 3.0).sqrt();
        assert!(s.get("a.w").unwrap().data.iter().all(|v| v.abs() <= bound));
        assert!(s.get("a.w").unwrap().data.iter().any(|&v| v != 0.0));
        assert!(s.get("a.b").unwrap().data.iter().all(|&v| v == 0.0));
        assert_eq!(s.num_params(), 9);
        let mut dup = s.clone();
        assert!(dup.add("a.w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn checkpoint_layout_and_round_trip() {
        let mut s = store();
        s.quantize_f32();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"OLDM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // BTreeMap order: "a.b" first.
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.b");
        let back = ParamStore::from_bytes(&bytes).unwrap();
        for name in s.names() {
            assert_eq!(back.get(name).unwrap(), s.get(name).unwrap());
        }
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            ParamStore::from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn gradient_accumulation() {
        let mut s = store();
        let mut g = Gradients::new();
        g.insert("a.b".into(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        s.accumulate(&g, 0.5).unwrap();
        s.accumulate(&g, 0.5).unwrap();
        assert_eq!(s.grad("a.b").unwrap().data, vec![1.0, 2.0, 3.0]);
        s.zero_grads();
        assert!(s.grad("a.b").unwrap().data.iter().all(|&v| v == 0.0));
        g.insert("nope".into(), Tensor::scalar(1.0));
        assert!(s.accumulate(&g, 1.0).is_err());
    }
}
