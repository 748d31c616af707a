//! Named parameter storage shared by the regressor and the reweighter,
//! plus the Adam optimizer that updates it.

use crate::autodiff::{Tape, Var};
use crate::error::{format_err, Result};
use crate::io;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Ordered, named collection of f64 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    /// Uniform(-limit, limit) matrix with limit = 1/sqrt(fan_in).
    pub fn insert_glorot(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
        let fan_in = shape[0].max(1) as f64;
        let limit = 1.0 / fan_in.sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-limit..limit));
        self.insert(name, value);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::ones(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.values[self.index[name]]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Register every parameter as a tape leaf, in insertion order.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        let vars = self.values.iter().map(|v| tape.var(v.clone())).collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }

    /// Apply an additive update, tensor by tensor.
    pub fn apply_delta(&mut self, deltas: &[ArrayD<f64>]) {
        assert_eq!(deltas.len(), self.values.len());
        for (v, d) in self.values.iter_mut().zip(deltas) {
            *v += d;
        }
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn named(&self) -> Vec<(String, ArrayD<f64>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// SHA-256 over names and raw bytes; detects any parameter mutation.
    pub fn hash(&self) -> String {
        io::params_hash(&self.named())
    }

    pub fn write_blob<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            io::write_tensor(w, &io::Tensor::F64(value.clone()))?;
        }
        Ok(())
    }

    pub fn read_blob<R: std::io::Read>(r: &mut R) -> Result<Self> {
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut buf2 = [0u8; 2];
            r.read_exact(&mut buf2)?;
            let name_len = u16::from_le_bytes(buf2) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| crate::error::Error::Format("non-utf8 parameter name".into()))?;
            match io::read_tensor(r)? {
                io::Tensor::F64(a) => store.insert(&name, a),
                t => format_err!("parameter {name} has dtype {:?}, expected float64", t.dtype()),
            }
        }
        Ok(store)
    }
}

/// Tape handles for every parameter of a store.
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
    index: BTreeMap<String, usize>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[self.index[name]]
    }

    pub fn all(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// One update step; `grads` in the store's insertion order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut deltas = Vec::with_capacity(grads.len());
        for (i, g) in grads.iter().enumerate() {
            self.m[i] = &self.m[i] * self.beta1 + g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let mhat = &self.m[i] / bc1;
            let vhat = &self.v[i] / bc2;
            let delta = mhat
                .iter()
                .zip(vhat.iter())
                .map(|(&m, &v)| -self.lr * m / (v.sqrt() + self.eps))
                .collect::<Vec<f64>>();
            deltas.push(ArrayD::from_shape_vec(g.raw_dim(), delta).unwrap());
        }
        params.apply_delta(&deltas);
    }
}
