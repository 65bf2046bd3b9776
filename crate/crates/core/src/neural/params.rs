//! Named parameter tables, gradients, and the Adam optimiser.
//!
//! Parameters live in a `BTreeMap` so every iteration (updates, checkpoint
//! serialisation, gradient sums) visits them in one fixed order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// One parameter table plus its frozen flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PTensor {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// All parameters of a model, keyed by dotted path names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    map: BTreeMap<String, PTensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Registers a new table; the name must be unused.
    pub fn insert(&mut self, name: &str, tensor: Tensor, frozen: bool) {
        let prev = self.map.insert(name.to_string(), PTensor { tensor, frozen });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// The table for `name`; panics if absent.
    pub fn get(&self, name: &str) -> &Tensor {
        &self.map.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.map.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}")).tensor
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.map.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).frozen
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.is_frozen(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.map.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}")).frozen =
            frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PTensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    /// Names of trainable tables, in map order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.map.iter().filter(|(_, p)| !p.frozen).map(|(k, _)| k.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries in trainable tables.
    pub fn trainable_scalars(&self) -> usize {
        self.map.values().filter(|p| !p.frozen).map(|p| p.tensor.data().len()).sum()
    }
}

/// Gradients for trainable parameters, keyed like [`ParamSet`].
///
/// Frozen parameters never get an entry; accumulation against a frozen
/// name is a bug and panics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Grads {
        Grads::default()
    }

    /// Adds `g` into the entry for `name`, creating it if needed.
    pub fn accumulate(&mut self, params: &ParamSet, name: &str, g: Tensor) {
        assert!(params.is_trainable(name), "gradient for frozen parameter {name}");
        match self.map.get_mut(name) {
            Some(t) => t.add_assign(&g),
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Entry-wise sum with another gradient set.
    pub fn merge(&mut self, other: &Grads) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(t) => t.add_assign(g),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    /// Multiplies every gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.scale(s);
        }
    }

    /// Largest absolute gradient entry, for logging.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Adam optimiser state (β₁=0.9, β₂=0.999, ε=1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update from `grads`; parameters without a gradient
    /// entry are untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            assert!(params.is_trainable(name), "gradient for frozen parameter {name}");
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Tensor with i.i.d. Gaussian entries of standard deviation `sigma`.
pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, sigma: f64) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_set() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("a.w", Tensor::from_vec(1, 2, vec![1.0, -2.0]), false);
        ps.insert("b.w", Tensor::from_vec(1, 1, vec![3.0]), true);
        ps
    }

    #[test]
    fn trainable_partition_is_visible() {
        let ps = small_set();
        assert_eq!(ps.trainable_names(), vec!["a.w".to_string()]);
        assert!(ps.is_frozen("b.w"));
        assert_eq!(ps.trainable_scalars(), 2);
    }

    #[test]
    #[should_panic(expected = "frozen parameter")]
    fn grads_reject_frozen_names() {
        let ps = small_set();
        let mut g = Grads::new();
        g.accumulate(&ps, "b.w", Tensor::zeros(1, 1));
    }

    #[test]
    fn adam_leaves_params_without_grads_unchanged() {
        let mut ps = small_set();
        let mut adam = Adam::new(1e-3);
        adam.step(&mut ps, &Grads::new());
        assert_eq!(ps.get("a.w").data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(1, 1, vec![1.0]), false);
        let mut adam = Adam::new(1e-1);
        for _ in 0..50 {
            let w = ps.get("w").get(0, 0);
            let mut g = Grads::new();
            g.accumulate(&ps, "w", Tensor::from_vec(1, 1, vec![2.0 * w]));
            adam.step(&mut ps, &g);
        }
        assert!(ps.get("w").get(0, 0).abs() < 1.0);
    }

    #[test]
    fn adam_single_step_magnitude() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(1, 1, vec![1.0]), false);
        let mut adam = Adam::new(1e-3);
        let mut g = Grads::new();
        g.accumulate(&ps, "w", Tensor::from_vec(1, 1, vec![0.5]));
        adam.step(&mut ps, &g);
        let w = ps.get("w").get(0, 0);
        assert!((w - (1.0 - 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn grads_merge_and_scale() {
        let ps = small_set();
        let mut g1 = Grads::new();
        g1.accumulate(&ps, "a.w", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let mut g2 = Grads::new();
        g2.accumulate(&ps, "a.w", Tensor::from_vec(1, 2, vec![10.0, 20.0]));
        g1.merge(&g2);
        g1.scale(0.5);
        assert_eq!(g1.get("a.w").unwrap().data(), &[5.5, 11.0]);
    }

    #[test]
    fn gaussian_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = gaussian(&mut r1, 3, 4, 0.02);
        let b = gaussian(&mut r2, 3, 4, 0.02);
        assert_eq!(a, b);
        let spread = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(spread > 0.0 && spread < 0.2);
    }
}
