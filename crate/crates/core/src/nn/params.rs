use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{NnError, Tensor};

/// One trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
            value,
        }
    }
}

/// Named parameter table. Iteration is sorted by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }
}

/// 64-bit FNV-1a, used to derive per-parameter seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic generator for a named parameter: ChaCha8 seeded with `seed ^ fnv1a(name)`.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Gaussian init; the values depend only on `(seed, name, shape, std)`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) {
        let mut rng = param_rng(seed, name);
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("sized from shape"));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(NnError::Shape {
                op: "set",
                detail: format!(
                    "parameter {} has shape {:?}, got {:?}",
                    name,
                    slot.shape(),
                    value.shape()
                ),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds a backward pass's gradients to the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), NnError> {
        for (name, g) in &grads.grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for p in self.params.values_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_init_depends_on_name_not_insertion_order() {
        let mut a = ParamStore::new();
        a.insert_normal("x", &[3, 2], 0.02, 7);
        a.insert_normal("y", &[4], 0.02, 7);
        let mut b = ParamStore::new();
        b.insert_normal("y", &[4], 0.02, 7);
        b.insert_normal("x", &[3, 2], 0.02, 7);
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
        assert_ne!(a.get("x").unwrap().data()[..4], a.get("y").unwrap().data()[..]);
    }

    #[test]
    fn iteration_is_sorted() {
        let mut s = ParamStore::new();
        s.insert_zeros("b", &[1]);
        s.insert_zeros("a", &[1]);
        s.insert_zeros("c", &[1]);
        let names: Vec<_> = s.names().cloned().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::new();
        s.insert_zeros("w", &[2]);
        let mut g = Gradients::default();
        g.grads.insert("w".into(), Tensor::from_vec(vec![3.0, 4.0]));
        s.accumulate(&g).unwrap();
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        let clipped = s.param("w").unwrap().grad.data().to_vec();
        assert!((clipped[0] - 0.6).abs() < 1e-15 && (clipped[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn set_rejects_wrong_shape() {
        let mut s = ParamStore::new();
        s.insert_zeros("w", &[2, 2]);
        assert!(s.set("w", Tensor::zeros(&[4])).is_err());
        assert!(s.set("missing", Tensor::zeros(&[4])).is_err());
    }
}
