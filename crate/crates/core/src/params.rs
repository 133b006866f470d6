//! Flat, name-addressed parameter registry (`"imp.head3.U"` style paths).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform matrix: entries in `(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        let t = Tensor::matrix(fan_in, fan_out, data).expect("positive extents");
        self.params.insert(name.to_string(), t);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name.to_string(), Tensor::zeros(shape));
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}
