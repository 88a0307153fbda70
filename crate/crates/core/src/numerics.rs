//! Parameter storage, plain SGD, inverted dropout and the finite-difference
//! gradient oracle.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded generator for an independent purpose (`stream`) under `seed`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamArray {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row `r` of a 2-D array.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.values[r * cols..(r + 1) * cols]
    }
}

/// Named trainable arrays, iterated in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    params: Vec<ParamArray>,
    index: HashMap<String, ParamId>,
    pub rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore {
            params: Vec::new(),
            index: HashMap::new(),
            rng_seed,
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let size: usize = shape.iter().product();
        if values.len() != size {
            return Err(Error::LengthMismatch {
                what: "parameter values",
                got: values.len(),
                expected: size,
            });
        }
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(ParamArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; size],
            values,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, shape, vec![0.0; shape.iter().product()])
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) for a `[rows, cols]` matrix.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.add(name, &[rows, cols], values)
    }

    /// Appends `extra` rows to a `[rows, cols]` array, drawn with the
    /// Glorot limit of the grown shape.
    pub fn grow_rows(&mut self, id: ParamId, extra: usize, rng: &mut impl Rng) -> Result<()> {
        let p = &mut self.params[id.0];
        let &[rows, cols] = p.shape.as_slice() else {
            return Err(Error::InvalidConfig(format!("{} is not a matrix", p.name)));
        };
        let limit = (6.0 / (rows + extra + cols) as f64).sqrt();
        p.values.extend((0..extra * cols).map(|_| rng.gen_range(-limit..=limit)));
        p.grad.resize(p.values.len(), 0.0);
        p.shape[0] += extra;
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> &ParamArray {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamArray {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamArray> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamArray> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(ParamArray::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.values.copy_from_slice(v);
        }
    }
}

/// `v ← v − lr·g` for every scalar, then zeroes the gradients.
///
/// The store is left untouched if any gradient is not finite.
pub fn sgd_step(store: &mut ParameterStore, lr: f64) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    for p in store.iter_mut() {
        for (v, g) in p.values.iter_mut().zip(p.grad.iter_mut()) {
            *v -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Predict,
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`. All ones when predicting or when `rate` is 0.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut impl Rng, mode: Mode) -> Vec<f64> {
    if mode == Mode::Predict || rate <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Compares the gradients accumulated by `loss_fn` against central
/// differences and returns the worst relative error
/// `|a − n| / max(1e-8, |a| + |n|)` over every scalar parameter.
///
/// `loss_fn` must be a pure function of the store that adds its gradient
/// into the store's grad buffers.
pub fn finite_diff_check<F>(store: &mut ParameterStore, eps: f64, mut loss_fn: F) -> f64
where
    F: FnMut(&mut ParameterStore) -> f64,
{
    store.zero_grads();
    loss_fn(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();

    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let id = ParamId(pi);
            let orig = store.get(id).values[k];
            store.get_mut(id).values[k] = orig + eps;
            let plus = loss_fn(store);
            store.get_mut(id).values[k] = orig - eps;
            let minus = loss_fn(store);
            store.get_mut(id).values[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    store.zero_grads();
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Network sizes and optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub char_emb_dim: usize,
    pub word_emb_dim: usize,
    pub char_hidden: usize,
    pub token_hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dev_fraction: f64,
    pub grad_clip: f64,
    /// Storage width of parameter values in checkpoints.
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            char_emb_dim: 25,
            word_emb_dim: 100,
            char_hidden: 25,
            token_hidden: 100,
            dropout: 0.5,
            lr: 0.005,
            max_epochs: 100,
            patience: 10,
            dev_fraction: 0.1,
            grad_clip: 5.0,
            precision: Precision::F64,
            seed: 42,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if [self.char_emb_dim, self.word_emb_dim, self.char_hidden, self.token_hidden].contains(&0) {
            return bad("all dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return bad("dev_fraction must be in (0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn token_input_dim(&self) -> usize {
        self.word_emb_dim + 2 * self.char_hidden
    }

    pub fn hidden_dim(&self) -> usize {
        2 * self.token_hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let mut s = ParameterStore::new(0);
        let id = s.add("w", &[1], vec![1.0]).unwrap();
        s.get_mut(id).grad[0] = 2.0;
        sgd_step(&mut s, 0.005).unwrap();
        assert!((s.get(id).values[0] - 0.99).abs() < 1e-15);
        assert_eq!(s.get(id).grad[0], 0.0);
    }

    #[test]
    fn sgd_zero_grad_and_zero_lr_are_identity() {
        let mut s = ParameterStore::new(0);
        let id = s.add("w", &[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = s.clone();
        sgd_step(&mut s, 0.1).unwrap();
        assert_eq!(s, before);
        s.get_mut(id).grad.copy_from_slice(&[1.0, 2.0, 3.0]);
        sgd_step(&mut s, 0.0).unwrap();
        assert_eq!(s.get(id).values, before.get(id).values);
    }

    #[test]
    fn sgd_rejects_nan_by_name() {
        let mut s = ParameterStore::new(0);
        s.add("ok", &[1], vec![1.0]).unwrap();
        let bad = s.add("emission.w", &[2], vec![1.0, 1.0]).unwrap();
        s.get_mut(bad).grad[1] = f64::NAN;
        let err = sgd_step(&mut s, 0.005).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in emission.w");
        assert_eq!(s.get(bad).values, vec![1.0, 1.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = derive_rng(1, 0);
        assert_eq!(dropout_mask(5, 0.0, &mut rng, Mode::Train), vec![1.0; 5]);
        assert_eq!(dropout_mask(5, 0.5, &mut rng, Mode::Predict), vec![1.0; 5]);
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = derive_rng(3, 0);
        let n = 1_000_000;
        let mask = dropout_mask(n, 0.5, &mut rng, Mode::Train);
        let mean = mask.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        let again = dropout_mask(n, 0.5, &mut derive_rng(3, 0), Mode::Train);
        assert_eq!(mask, again);
    }

    #[test]
    fn finite_diff_on_quadratic_and_constant() {
        let mut s = ParameterStore::new(0);
        s.add("a", &[3], vec![0.3, -1.2, 2.5]).unwrap();
        s.add("b", &[2], vec![4.0, -0.7]).unwrap();
        let quad = |st: &mut ParameterStore| {
            let mut loss = 0.0;
            for p in st.iter_mut() {
                for (v, g) in p.values.iter().zip(p.grad.iter_mut()) {
                    loss += v * v;
                    *g += 2.0 * v;
                }
            }
            loss
        };
        assert!(finite_diff_check(&mut s, 1e-5, quad) < 1e-9);
        assert_eq!(finite_diff_check(&mut s, 1e-5, |_| 3.0), 0.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParameterStore::new(0);
        let id = s.add("w", &[2], vec![0.0, 0.0]).unwrap();
        s.get_mut(id).grad.copy_from_slice(&[30.0, 40.0]);
        assert_eq!(s.clip_grad_norm(5.0), 50.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainingConfig::default();
        assert_eq!((c.char_emb_dim, c.word_emb_dim, c.char_hidden, c.token_hidden), (25, 100, 25, 100));
        assert_eq!((c.dropout, c.lr, c.max_epochs, c.patience), (0.5, 0.005, 100, 10));
        c.validate().unwrap();
        let bad = TrainingConfig { dropout: 1.0, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig { token_hidden: 0, ..c };
        assert!(bad.validate().is_err());
    }
}
