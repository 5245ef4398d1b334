//! Dense layers, initialization and the Adam optimizer used by every trainer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Graph, Var};

/// Anything that owns trainable matrices, visited in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Array2<f64>>;
    fn params_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers every parameter as a leaf, in `params()` order.
    fn bind_all(&self, g: &Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.leaf(p.clone())).collect()
    }
}

/// Xavier/Glorot uniform initialization.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            weight: xavier(rng, input, output),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn bind(&self, g: &Graph) -> LinearVars {
        LinearVars {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
        }
    }

    /// Plain forward pass on a row batch.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            weight: vars[0],
            bias: vars[1],
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.add_row(g.matmul(x, self.weight), self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter moment buffers, keyed by visit order.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "adam: parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

/// Sinusoidal embedding of integer time steps, one row per step.
pub fn time_embedding(steps: &[usize], width: usize) -> Array2<f64> {
    let half = width / 2;
    Array2::from_shape_fn((steps.len(), width), |(r, c)| {
        let t = steps[r] as f64;
        let k = (c % half.max(1)) as f64;
        let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
        if c < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}
