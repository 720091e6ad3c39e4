use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `1 / sqrt(rows)` (rows = fan-in for `[in, out]` weights).
    FanIn,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub init: Init,
}

/// Named parameter arrays. Names are stable and unique; they key checkpoints
/// and the ablation audit.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and initializes it from `rng`.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::full(rows, cols, 1.0),
            Init::Normal(std) => normal_tensor(rows, cols, std, rng),
            Init::FanIn => normal_tensor(rows, cols, 1.0 / (rows as f64).sqrt(), rng),
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            init,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rounds every value to the nearest f32, matching what a checkpoint
    /// stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in &mut p.value.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn normal_tensor(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: vec![0; n_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let c = self.config;
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut store.params[i].value;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = c.beta1 * m.data[j] + (1.0 - c.beta1) * gj;
                v.data[j] = c.beta2 * v.data[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[j]);
            }
        }
    }
}
