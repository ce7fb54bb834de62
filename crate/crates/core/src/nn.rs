//! Named parameter storage, lazy binding onto a tape, initialisers and Adam.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use semcom_autograd::{Gradients, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Serialisable tensor image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl StoredTensor {
    pub fn into_tensor(self) -> Option<Tensor> {
        let n: usize = self.shape.iter().product();
        (n == self.data.len()).then(|| Tensor::new(&self.shape, self.data))
    }
}

/// Flat map of parameter tensors. Names are dotted paths whose first segment is the
/// parameter group (`ext`, `sel`, `enc`, `dec`, `fus`, `det`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count_values(&self, group: &str) -> usize {
        self.iter()
            .filter(|(n, _)| in_group(n, group))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// SHA-256 over the names and little-endian bytes of every tensor in `group`.
    pub fn group_hash(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| in_group(n, group)) {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Binds parameters lazily: each is pushed onto `tape` on first use, as a
    /// differentiable leaf if `trainable(name)` holds and as a constant otherwise.
    pub fn bind<'p, 't>(
        &'p self,
        tape: &'t Tape,
        trainable: impl Fn(&str) -> bool + 'p,
    ) -> Bound<'p, 't> {
        Bound {
            params: self,
            tape,
            trainable: Box::new(trainable),
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn to_stored(&self) -> BTreeMap<String, StoredTensor> {
        self.iter().map(|(n, t)| (n.clone(), t.into())).collect()
    }

    pub fn from_stored(stored: BTreeMap<String, StoredTensor>) -> Option<Self> {
        let mut p = ParamSet::new();
        for (n, s) in stored {
            p.insert(n, s.into_tensor()?);
        }
        Some(p)
    }
}

pub fn in_group(name: &str, group: &str) -> bool {
    name.split('.').next() == Some(group)
}

pub struct Bound<'p, 't> {
    params: &'p ParamSet,
    tape: &'t Tape,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'p, 't> Bound<'p, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let t = self.params.get(name).clone();
        let v = if (self.trainable)(name) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// `x W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(self.get(&format!("{prefix}.w")))
            .add_row(self.get(&format!("{prefix}.b")))
    }

    /// Gradients of every trainable parameter touched so far.
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter(|(n, _)| (self.trainable)(n))
            .map(|(n, v)| (n.clone(), g.get_or_zeros(*v)))
            .collect()
    }
}

/// He-normal initialisation for a `[fan_in, fan_out]` weight.
pub fn kaiming(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, &[fan_in, fan_out], std)
}

/// Glorot-normal initialisation for a `[fan_in, fan_out]` weight.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(rng, &[fan_in, fan_out], std)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| d.sample(rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One bias-corrected step over the parameters present in `grads`.
    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Sums `add` into `acc`, creating entries as needed.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, add: BTreeMap<String, Tensor>) {
    for (n, g) in add {
        match acc.get_mut(&n) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(n, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::new(&[1], vec![2.0]));
        p.insert("b.w", Tensor::new(&[1], vec![3.0]));
        let tape = Tape::new();
        let bound = p.bind(&tape, |n| in_group(n, "a"));
        let y = bound.get("a.w").mul(bound.get("b.w")).sum();
        let g = bound.grads(&tape.backward(y));
        assert_eq!(g.len(), 1);
        assert_eq!(g["a.w"].data(), &[3.0]);
    }

    #[test]
    fn group_hash_tracks_only_its_group() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::new(&[1], vec![2.0]));
        p.insert("ab.w", Tensor::new(&[1], vec![3.0]));
        let h = p.group_hash("a");
        p.get_mut("ab.w").data_mut()[0] = 4.0;
        assert_eq!(h, p.group_hash("a"));
        p.get_mut("a.w").data_mut()[0] = 4.0;
        assert_ne!(h, p.group_hash("a"));
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x.w", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g: BTreeMap<_, _> = [("x.w".to_string(), p.get("x.w").map(|x| 2.0 * x))].into();
            opt.update(&mut p, &g, 0.05);
        }
        assert!(p.get("x.w").norm() < 1e-3);
    }
}
