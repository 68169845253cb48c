//! Minimal differentiable engine: named parameter tensors with gradient
//! buffers, hand-written layer primitives, Adam, and a finite-difference
//! gradient checker.

mod checkpoint;
mod gru;
mod ops;

pub use checkpoint::Checkpoint;
pub use gru::{Gru, GruTrace};
pub use ops::{
    axpy, bpr_loss, cosine, cosine_backward, dense, dense_backward, dot, embed_backward, embed_lookup, sigmoid,
    softmax, softmax_backward, Activation, Dense,
};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle to a tensor inside a [`ModelState`], valid for the state that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// uniform(-1/sqrt(D), 1/sqrt(D)) for a `[V, D]` table.
    Embedding,
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a `[O, I]` matrix.
    FanIn,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    tensors: Vec<ParamTensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ModelState {
    pub fn new(seed: u64) -> Self {
        ModelState {
            tensors: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Register a tensor. Names must be unique; initial values are drawn from
    /// the state's own stream, so creation order fixes the initialization.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("{name}: empty shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let bound = match init {
            Init::Zeros => 0.0,
            Init::Embedding | Init::FanIn => 1.0 / (*shape.last().unwrap() as f64).sqrt(),
        };
        let values = if bound == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
        };
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad: vec![0.0; n],
        });
        self.m.push(vec![0.0; n]);
        self.v.push(vec![0.0; n]);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn params(&self) -> Params<'_> {
        Params {
            v: self.tensors.iter().map(|t| t.values.as_slice()).collect(),
        }
    }

    /// Read-only values alongside writable gradient buffers, for backward passes.
    pub fn split(&mut self) -> (Params<'_>, Grads<'_>) {
        let (v, g) = self
            .tensors
            .iter_mut()
            .map(|t| (t.values.as_slice(), t.grad.as_mut_slice()))
            .unzip();
        (Params { v }, Grads { g })
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grad(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn values_snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values.clone()).collect()
    }

    pub fn restore_values(&mut self, snap: &[Vec<f64>]) -> Result<()> {
        if snap.len() != self.tensors.len() || snap.iter().zip(&self.tensors).any(|(s, t)| s.len() != t.len()) {
            return Err(Error::Shape("snapshot does not match state".into()));
        }
        for (t, s) in self.tensors.iter_mut().zip(snap) {
            t.values.copy_from_slice(s);
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.values.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Bias-corrected Adam with decoupled weight decay. Zeroes the gradients
    /// and advances the step counter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in self.tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.values[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p.values[i]);
                p.grad[i] = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Read-only view of every tensor's values, indexed by [`ParamId`].
pub struct Params<'a> {
    v: Vec<&'a [f64]>,
}

impl<'a> Params<'a> {
    pub fn get(&self, id: ParamId) -> &'a [f64] {
        self.v[id.0]
    }
}

/// Writable view of every tensor's gradient buffer.
pub struct Grads<'a> {
    g: Vec<&'a mut [f64]>,
}

impl Grads<'_> {
    pub fn get(&mut self, id: ParamId) -> &mut [f64] {
        self.g[id.0]
    }

    /// Two distinct gradient buffers at once.
    pub fn pair(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b, "pair needs distinct tensors");
        if a.0 < b.0 {
            let (lo, hi) = self.g.split_at_mut(b.0);
            (&mut *lo[a.0], &mut *hi[0])
        } else {
            let (lo, hi) = self.g.split_at_mut(a.0);
            (&mut *hi[0], &mut *lo[b.0])
        }
    }
}

/// Largest relative error between analytic and central-difference gradients.
///
/// `loss_grad` must leave the gradient of its returned loss in the state's
/// gradient buffers (they are zeroed beforehand); `loss` evaluates only the
/// forward pass. At most `n_coords` coordinates are probed, chosen uniformly
/// without replacement with `seed`; all of them when the state is smaller.
/// Relative error is `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn finite_difference_check(
    state: &mut ModelState,
    mut loss: impl FnMut(&ModelState) -> Result<f64>,
    mut loss_grad: impl FnMut(&mut ModelState) -> Result<f64>,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    state.zero_grad();
    let f0 = loss_grad(state)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let coords: Vec<(usize, usize)> = state
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let analytic: Vec<f64> = coords.iter().map(|&(t, i)| state.tensors[t].grad[i]).collect();
    state.zero_grad();
    let picks: Vec<usize> = if coords.len() <= n_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample(&mut rng, coords.len(), n_coords).into_vec();
        s.sort_unstable();
        s
    };
    let mut worst: f64 = 0.0;
    for k in picks {
        let (t, i) = coords[k];
        let orig = state.tensors[t].values[i];
        state.tensors[t].values[i] = orig + eps;
        let fp = loss(state)?;
        state.tensors[t].values[i] = orig - eps;
        let fm = loss(state)?;
        state.tensors[t].values[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective near {}[{i}]", state.tensors[t].name)));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[k];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}
