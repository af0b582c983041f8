use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor};

/// Ordered set of named, trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds tape gradients of bound parameters into each tensor's `grad`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (name, v) in grads.params() {
            let Some(g) = grads.get(*v) else { continue };
            let t = self.get_mut(name)?;
            debug_assert_eq!(tape.value(*v).numel(), t.numel());
            if let Some(dst) = t.grad_mut() {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Sets `requires_grad` on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for (k, v) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                v.set_requires_grad(on);
            }
        }
    }

    /// Copies values of parameters selected by `filter` from `src`.
    /// Only names present in both stores are touched; shapes must agree.
    /// Returns the names copied.
    pub fn load_from(
        &mut self,
        src: &ParamStore,
        filter: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (name, t) in self.params.iter_mut() {
            if !filter(name) {
                continue;
            }
            let Some(s) = src.params.get(name) else {
                continue;
            };
            if s.shape() != t.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("`{name}`: model {:?}, source {:?}", t.shape(), s.shape()),
                ));
            }
            t.data_mut().copy_from_slice(s.data());
            loaded.push(name.clone());
        }
        Ok(loaded)
    }
}

/// 64-bit FNV-1a, used to give every parameter name its own RNG stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent seed for the `index`-th use of stream `tag` under `base`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut x = base ^ fnv1a(tag.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seeded parameter factory. Each name draws from an independent stream so a
/// parameter's initial value does not depend on registration order.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    pub seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// Glorot-uniform `[rows, cols]`, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&self, store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = self.stream(name);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        store.insert(name, Tensor::new(&[rows, cols], data, true).expect("finite"));
    }

    pub fn constant(&self, store: &mut ParamStore, name: &str, len: usize, value: f64) {
        store.insert(name, Tensor::new(&[len], vec![value; len], true).expect("finite"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_is_seeded_and_bounded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Initializer::new(9).glorot(&mut a, "w", 3, 4);
        Initializer::new(9).glorot(&mut b, "w", 3, 4);
        assert_eq!(a, b);
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));

        let mut c = ParamStore::new();
        Initializer::new(9).glorot(&mut c, "other", 3, 4);
        assert_ne!(a.get("w").unwrap().data(), c.get("other").unwrap().data());
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut dst = ParamStore::new();
        let mut src = ParamStore::new();
        let init = Initializer::new(1);
        init.glorot(&mut dst, "a.w", 2, 2);
        init.glorot(&mut src, "a.w", 2, 3);
        let err = dst.load_from(&src, |_| true).unwrap_err();
        assert!(err.to_string().contains("a.w"), "{err}");
    }
}
