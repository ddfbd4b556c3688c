//! Parameter store, layer helpers and the Adam optimizer.
//!
//! Parameters live outside any tape in a [`ParamStore`] keyed by dotted
//! names (`tryon.app_enc.l0.w`). A forward pass binds them into a [`Tape`]
//! via `named_leaf`, and after `backward` the gradients are gathered back
//! by name. BTreeMap keeps iteration order deterministic.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Arr, Grads, Tape, Var};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Arr,
    pub m: Option<Arr>,
    pub v: Option<Arr>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.params.insert(name.to_string(), Param { value, m: None, v: None });
    }

    pub fn get(&self, name: &str) -> &Arr {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Bind a parameter into the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Var {
        tape.named_leaf(name, self.get(name).clone())
    }

    /// Bind a parameter as a constant (frozen network).
    pub fn bind_frozen(&self, tape: &mut Tape, name: &str) -> Var {
        tape.constant(self.get(name).clone())
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }
}

/// Collect gradients for every named leaf of the tape, keyed by name.
pub fn collect_param_grads(tape: &Tape, grads: &Grads) -> BTreeMap<String, Arr> {
    let mut out = BTreeMap::new();
    for (name, var) in tape.named_leaves() {
        if let Some(g) = grads.get(var) {
            out.insert(name.to_string(), g.clone());
        }
    }
    out
}

/// Sum gradient maps in index order (deterministic across runs).
pub fn sum_grads(parts: Vec<BTreeMap<String, Arr>>) -> BTreeMap<String, Arr> {
    let mut total: BTreeMap<String, Arr> = BTreeMap::new();
    for part in parts {
        for (k, g) in part {
            match total.get_mut(&k) {
                Some(acc) => *acc += &g,
                None => {
                    total.insert(k, g);
                }
            }
        }
    }
    total
}

// ---- initialization ----

/// Kaiming-uniform fan-in init for a conv weight [Cout,Cin,k,k].
pub fn init_conv_weight(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Arr {
    let fan_in = (cin * k * k) as f64;
    let bound = (1.0 / fan_in).sqrt() * 3f64.sqrt();
    Arr::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| rng.gen_range(-bound..bound))
}

pub fn init_bias(cout: usize) -> Arr {
    Arr::zeros(IxDyn(&[cout]))
}

// ---- layers ----

/// A conv layer described by its parameter names; weights live in the store.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        Self { name: name.into(), cin, cout, k, stride, pad: k / 2, bias }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(&format!("{}.w", self.name), init_conv_weight(rng, self.cout, self.cin, self.k));
        if self.bias {
            store.insert(&format!("{}.b", self.name), init_bias(self.cout));
        }
    }

    /// Zero init for residual heads, so the layer contributes nothing at
    /// the first step and the surrounding block starts as the identity.
    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(&format!("{}.w", self.name), Arr::zeros(IxDyn(&[self.cout, self.cin, self.k, self.k])));
        if self.bias {
            store.insert(&format!("{}.b", self.name), init_bias(self.cout));
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Var {
        let bind = |tape: &mut Tape, n: &str| {
            if frozen {
                store.bind_frozen(tape, n)
            } else {
                store.bind(tape, n)
            }
        };
        let w = bind(tape, &format!("{}.w", self.name));
        let b = self.bias.then(|| bind(tape, &format!("{}.b", self.name)));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

// ---- optimizer ----

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0 }
    }

    /// Apply one update to every parameter that has a gradient. Parameters
    /// matching none of the gradient keys are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, g) in grads {
            let Some(p) = self.param_mut(store, name) else { continue };
            let m = p.m.get_or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
            });
            let v = p.v.get_or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
            });
            let (m, v) = (p.m.as_ref().unwrap(), p.v.as_ref().unwrap());
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            ndarray::Zip::from(&mut p.value).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }

    fn param_mut<'a>(&self, store: &'a mut ParamStore, name: &str) -> Option<&'a mut Param> {
        store.params.get_mut(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", arr1(&[5.0]).into_dyn());
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let x = store.get("x")[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), arr1(&[2.0 * x]).into_dyn());
            adam.step(&mut store, &grads);
        }
        assert!(store.get("x")[0].abs() < 1e-2);
    }

    #[test]
    fn conv_layer_roundtrip_through_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let conv = Conv2d::new("net.c0", 3, 4, 3, 1, true);
        conv.init(&mut store, &mut rng);
        assert!(store.contains("net.c0.w"));
        assert!(store.contains("net.c0.b"));
        let mut tape = Tape::new();
        let x = tape.constant(Arr::zeros(IxDyn(&[1, 3, 8, 8])));
        let y = conv.forward(&mut tape, &store, x, false);
        assert_eq!(tape.value(y).shape(), &[1, 4, 8, 8]);
    }
}
