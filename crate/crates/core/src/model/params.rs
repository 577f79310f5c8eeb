//! Named parameter tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn insert(&mut self, name: String, mut tensor: Tensor<T>) {
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn expect(&self, name: &str) -> &Tensor<T> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrites values from `source`, checking shapes.
    pub fn assign(&mut self, name: &str, values: &Tensor<f32>) -> Result<()> {
        let t = self.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if t.shape() != values.shape() {
            return Err(Error::dim(
                "load",
                format!("parameter {name}: stored {:?}, model {:?}", values.shape(), t.shape()),
            ));
        }
        for (d, &s) in t.data_mut().iter_mut().zip(values.data()) {
            *d = T::from_f32(s).expect("finite");
        }
        Ok(())
    }
}

/// FNV-1a; stable across runs and platforms.
pub(crate) fn stable_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Normal(0, std) values drawn from a stream that depends only on `(seed, name)`.
pub(crate) fn normal_init<T: Scalar>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(name));
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f32(dist.sample(&mut rng) as f32).expect("finite")).collect();
    Tensor::from_vec(shape, data).expect("shape")
}
