use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Initialization scheme for a registered tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zero,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Xavier/Glorot uniform for a `rows x cols` weight matrix.
    XavierUniform,
    /// Identity matrix (requires rows == cols).
    Identity,
}

#[derive(Clone)]
struct ParamTensor {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    trainable: bool,
}

/// Named parameter tensors with same-shaped gradient accumulators.
///
/// Shapes are fixed at registration. The training loop owns the store
/// exclusively during a step; forward passes only need `&ParamStore`.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamTensor>,
    by_name: std::collections::HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let n = rows * cols;
        let value = match init {
            Init::Zero => vec![0.0; n],
            Init::Normal(sd) => {
                let dist = rand_distr_normal(sd);
                (0..n).map(|_| dist(rng)).collect()
            }
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Identity => {
                assert_eq!(rows, cols, "identity init requires a square matrix");
                let mut v = vec![0.0; n];
                for i in 0..rows {
                    v[i * cols + i] = 1.0;
                }
                v
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            value,
            grad: vec![0.0; n],
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    /// Registers a tensor excluded from gradient updates and checkpointed
    /// as-is (used for the frozen codebook bases).
    pub fn register_frozen(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let id = self.register(name, rows, cols, init, rng);
        self.entries[id.0].trainable = false;
        id
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn row(&self, id: ParamId, r: usize) -> &[f64] {
        let e = &self.entries[id.0];
        &e.value[r * e.cols..(r + 1) * e.cols]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// `grad += scale * g` over the whole tensor.
    pub fn add_grad(&mut self, id: ParamId, g: &[f64], scale: f64) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(g.len(), e.grad.len());
        for (a, b) in e.grad.iter_mut().zip(g) {
            *a += scale * b;
        }
    }

    /// `grad[row r] += scale * g`.
    pub fn add_grad_row(&mut self, id: ParamId, r: usize, g: &[f64], scale: f64) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(g.len(), e.cols);
        let dst = &mut e.grad[r * e.cols..(r + 1) * e.cols];
        for (a, b) in dst.iter_mut().zip(g) {
            *a += scale * b;
        }
    }

    /// Rank-1 accumulate: `grad[r][c] += scale * dy[r] * x[c]`.
    pub fn add_grad_outer(&mut self, id: ParamId, dy: &[f64], x: &[f64], scale: f64) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(dy.len(), e.rows);
        debug_assert_eq!(x.len(), e.cols);
        for (r, &d) in dy.iter().enumerate() {
            let row = &mut e.grad[r * e.cols..(r + 1) * e.cols];
            let s = scale * d;
            for (a, b) in row.iter_mut().zip(x) {
                *a += s * b;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Iterate `(id, name)` in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Global L2 norm over all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every trainable gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            e.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Snapshot of all values, in registration order.
    pub fn clone_values(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restore a snapshot taken with [`Self::clone_values`].
    pub fn restore_values(&mut self, values: &[Vec<f64>]) {
        assert_eq!(values.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value.copy_from_slice(v);
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for e in &self.entries {
            if !e.value.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", e.name)));
            }
        }
        Ok(())
    }
}

/// Box-Muller Gaussian, avoiding a rand_distr dependency for one function.
fn rand_distr_normal(sd: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |rng| {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Plain SGD with momentum, with Adam as the configurable alternative.
pub struct Optimizer {
    kind: OptimizerKind,
    velocity: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    /// Rescale the base learning rate (for schedules).
    pub fn set_lr(&mut self, lr: f64) {
        match &mut self.kind {
            OptimizerKind::Sgd { lr: l, .. } => *l = lr,
            OptimizerKind::Adam { lr: l, .. } => *l = lr,
        }
    }

    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store
            .ids()
            .map(|id| {
                let (r, c) = store.shape(id);
                r * c
            })
            .collect();
        Self {
            kind,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Apply one update from the accumulated gradients.
    pub fn apply(&mut self, store: &mut ParamStore) {
        self.t += 1;
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let idx = id.0;
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    let g: Vec<f64> = store.grad(id).to_vec();
                    let vel = &mut self.velocity[idx];
                    let value = store.value_mut(id);
                    for i in 0..value.len() {
                        vel[i] = momentum * vel[i] + g[i];
                        value[i] -= lr * vel[i];
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let g: Vec<f64> = store.grad(id).to_vec();
                    let m = &mut self.velocity[idx];
                    let v = &mut self.second[idx];
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    let value = store.value_mut(id);
                    for i in 0..value.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        value[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.bump_step();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn register_and_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.register("w", 2, 3, Init::Zero, &mut rng);
        store.add_grad_row(w, 1, &[1.0, 2.0, 3.0], 2.0);
        assert_eq!(store.grad(w), &[0.0, 0.0, 0.0, 2.0, 4.0, 6.0]);
        store.zero_grads();
        assert!(store.grad(w).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn identity_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = store.register("m", 3, 3, Init::Identity, &mut rng);
        assert_eq!(store.row(m, 1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_gradient_means_no_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.register("w", 2, 2, Init::Normal(0.1), &mut rng);
        let before = store.value(w).to_vec();
        let mut opt = Optimizer::new(
            OptimizerKind::Sgd { lr: 0.1, momentum: 0.9 },
            &store,
        );
        opt.apply(&mut store);
        assert_eq!(store.value(w), before.as_slice());
    }

    #[test]
    fn frozen_tensor_is_not_updated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.register_frozen("b", 2, 2, Init::Normal(1.0), &mut rng);
        let before = store.value(w).to_vec();
        store.add_grad(w, &[1.0; 4], 1.0);
        let mut opt = Optimizer::new(
            OptimizerKind::Sgd { lr: 0.1, momentum: 0.0 },
            &store,
        );
        opt.apply(&mut store);
        assert_eq!(store.value(w), before.as_slice());
    }
}
