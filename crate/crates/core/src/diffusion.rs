//! Conditional Gaussian diffusion over ability vectors.
//!
//! The denoiser outputs the reverse-process mean. Internally it is written
//! as `mu = c1(t) * f(x_t, cond, t) + c2(t) * x_t` with `f` a small MLP, i.e.
//! the posterior-mean formula evaluated at a learned estimate of `x0`. This
//! keeps the network well conditioned when `beta_t` is tiny and makes the
//! `x0` estimate needed by the strided sampler an exact inversion.

use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{time_embedding, Adam, AdamConfig, Linear, LinearVars, Parameterized};
use crate::seed::{self, Stream};
use crate::tape::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_betas(r.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl NoiseSchedule {
    /// `betas[0]` is `beta_1`. Betas must be non-decreasing and inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("noise schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Invalid("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("betas must be non-decreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("noise schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product of alphas, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients `(c1, c2)` with `mu_tilde = c1 * x0 + c2 * x_t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c1 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let c2 = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c1, c2)
    }

    /// Coefficients of the noise-free jump from time `t` to an earlier time `s`
    /// given an estimate of `x0`: `x_s = a * x0 + b * x_t`.
    pub fn jump_coefs(&self, t: usize, s: usize) -> (f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_s = self.alpha_bar(s);
        let ratio = ab_t / ab_s;
        let a = ab_s.sqrt() * (1.0 - ratio) / (1.0 - ab_t);
        let b = ratio.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        (a, b)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Forward corruption `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if eps.len() != x0.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let ab = sched.alpha_bar(t);
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
        .collect())
}

/// Mean of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_mean(x_t: &[f64], x0: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    let (c1, c2) = sched.posterior_coefs(t);
    Ok(x0.iter().zip(x_t).map(|(a, b)| c1 * a + c2 * b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    /// Two hidden layers of width `4 * dim`.
    pub fn new(dim: usize, cond_dim: usize) -> Self {
        Self {
            dim,
            cond_dim,
            hidden: 4 * dim,
            time_dim: 16,
        }
    }
}

/// MLP over `[x_t, cond]` with a sinusoidal step embedding added to the
/// first hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    input: Linear,
    time: Linear,
    hidden: Linear,
    output: Linear,
}

impl Parameterized for DenoiserNet {
    fn params(&self) -> Vec<&Array2<f64>> {
        [&self.input, &self.time, &self.hidden, &self.output]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        [&mut self.input, &mut self.time, &mut self.hidden, &mut self.output]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserVars {
    input: LinearVars,
    time: LinearVars,
    hidden: LinearVars,
    output: LinearVars,
}

impl DenoiserVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            input: LinearVars::from_slice(&vars[0..2]),
            time: LinearVars::from_slice(&vars[2..4]),
            hidden: LinearVars::from_slice(&vars[4..6]),
            output: LinearVars::from_slice(&vars[6..8]),
        }
    }
}

fn coef_column(ts: &[usize], f: impl Fn(usize) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((ts.len(), 1), |(r, _)| f(ts[r]))
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: DenoiserConfig) -> Self {
        let DenoiserConfig {
            dim,
            cond_dim,
            hidden,
            time_dim,
        } = config;
        Self {
            config,
            input: Linear::new(rng, dim + cond_dim, hidden),
            time: Linear::new(rng, time_dim, hidden),
            hidden: Linear::new(rng, hidden, hidden),
            output: Linear::new(rng, hidden, dim),
        }
    }

    fn check_batch(&self, x: &Array2<f64>, cond: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.config.dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.dim,
                got: x.ncols(),
            });
        }
        if cond.ncols() != self.config.cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.cond_dim,
                got: cond.ncols(),
            });
        }
        if cond.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: cond.nrows(),
            });
        }
        Ok(())
    }

    /// Estimate of `x0` for each row.
    pub fn predict_x0(&self, x: &Array2<f64>, cond: &Array2<f64>, ts: &[usize]) -> Array2<f64> {
        let inp = ndarray::concatenate(Axis(1), &[x.view(), cond.view()]).expect("row counts agree");
        let emb = time_embedding(ts, self.config.time_dim);
        let h1 = (self.input.apply(&inp) + self.time.apply(&emb)).mapv(f64::tanh);
        let h2 = self.hidden.apply(&h1).mapv(f64::tanh);
        self.output.apply(&h2)
    }

    /// Reverse-process mean `mu_delta(x_t, cond, t)` for each row.
    pub fn mean(
        &self,
        sched: &NoiseSchedule,
        x: &Array2<f64>,
        cond: &Array2<f64>,
        ts: &[usize],
    ) -> Result<Array2<f64>> {
        self.check_batch(x, cond)?;
        for &t in ts {
            sched.check(t)?;
        }
        let f = self.predict_x0(x, cond, ts);
        let c1 = coef_column(ts, |t| sched.posterior_coefs(t).0);
        let c2 = coef_column(ts, |t| sched.posterior_coefs(t).1);
        Ok(f * &c1 + x * &c2)
    }

    pub fn predict_x0_tape(&self, g: &Graph, v: &DenoiserVars, x: Var, cond: Var, ts: &[usize]) -> Var {
        let inp = g.concat_cols(x, cond);
        let emb = g.constant(time_embedding(ts, self.config.time_dim));
        let h1 = g.tanh(g.add(v.input.forward(g, inp), v.time.forward(g, emb)));
        let h2 = g.tanh(v.hidden.forward(g, h1));
        v.output.forward(g, h2)
    }

    pub fn mean_tape(
        &self,
        g: &Graph,
        v: &DenoiserVars,
        sched: &NoiseSchedule,
        x: Var,
        cond: Var,
        ts: &[usize],
    ) -> Var {
        let f = self.predict_x0_tape(g, v, x, cond, ts);
        let c1 = g.constant(coef_column(ts, |t| sched.posterior_coefs(t).0));
        let c2 = g.constant(coef_column(ts, |t| sched.posterior_coefs(t).1));
        g.add(g.mul_col(f, c1), g.mul_col(x, c2))
    }
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// One draw of the denoising objective for a single vector: a step `t` is
/// drawn uniformly from `1..=T`; `t = 1` uses the reconstruction term.
pub fn denoising_loss<R: Rng + ?Sized>(
    x0: &[f64],
    cond: &[f64],
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let t = rng.random_range(1..=sched.steps());
    let eps: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
    denoising_loss_at(x0, cond, net, sched, t, &eps)
}

/// The denoising objective at a fixed step and noise draw.
pub fn denoising_loss_at(
    x0: &[f64],
    cond: &[f64],
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    let xt = q_sample(x0, t, eps, sched)?;
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
    let mu = net.mean(sched, &row(&xt), &row(cond), &[t])?;
    let (target, weight) = loss_target(sched, t, x0, &xt);
    Ok(weight
        * mu.iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>())
}

fn loss_target(sched: &NoiseSchedule, t: usize, x0: &[f64], xt: &[f64]) -> (Vec<f64>, f64) {
    if t == 1 {
        (x0.to_vec(), 1.0)
    } else {
        let (c1, c2) = sched.posterior_coefs(t);
        let target = x0.iter().zip(xt).map(|(a, b)| c1 * a + c2 * b).collect();
        (target, 0.5 / sched.beta(t))
    }
}

/// Batch denoising objective on the tape, averaged over rows. `x0` and `cond`
/// enter as constants; `ts` and `eps` give one step and noise row per example.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss_tape(
    g: &Graph,
    v: &DenoiserVars,
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    x0: &Array2<f64>,
    cond: &Array2<f64>,
    ts: &[usize],
    eps: &Array2<f64>,
) -> Var {
    let n = x0.nrows();
    let mut xt = Array2::zeros(x0.dim());
    let mut target = Array2::zeros(x0.dim());
    let mut weight = Array2::zeros((n, 1));
    for r in 0..n {
        let x0r = x0.row(r).to_vec();
        let x = q_sample(&x0r, ts[r], eps.row(r).as_slice().expect("contiguous"), sched)
            .expect("step in range");
        let (tg, w) = loss_target(sched, ts[r], &x0r, &x);
        xt.row_mut(r).assign(&Array1::from(x));
        target.row_mut(r).assign(&Array1::from(tg));
        weight[[r, 0]] = w / n as f64;
    }
    let xt = g.constant(xt);
    let cond = g.constant(cond.clone());
    let mu = net.mean_tape(g, v, sched, xt, cond, ts);
    let diff = g.sub(mu, g.constant(target));
    let per_row = g.sum_cols(g.square(diff));
    g.sum(g.mul(per_row, g.constant(weight)))
}

/// How ancestral sampling injects noise between steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AncestralNoise {
    /// `sqrt(beta_t) * eps` with `eps ~ N(0, I)`.
    #[default]
    Gaussian,
    /// `beta_t * eps` with `eps ~ U(0, 1)` per coordinate.
    ScaledUniform,
    /// No injected noise: the deterministic mean trajectory.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerConfig {
    Ancestral { noise: AncestralNoise },
    Fast { steps: usize },
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig::Fast { steps: 30 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if let SamplerConfig::Fast { steps } = *self {
            if steps < 1 || steps > sched.steps() {
                return Err(Error::Invalid(format!(
                    "fast sampler steps must be in 1..={}, got {steps}",
                    sched.steps()
                )));
            }
        }
        Ok(())
    }
}

fn ensure_finite(x: &Array2<f64>, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Full reverse chain from `x_T = eps0`, one row per sample.
pub fn ancestral_sample<R: Rng + ?Sized>(
    net: &DenoiserNet,
    cond: &Array2<f64>,
    eps0: &Array2<f64>,
    sched: &NoiseSchedule,
    noise: AncestralNoise,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let n = eps0.nrows();
    let mut x = eps0.clone();
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; n];
        x = net.mean(sched, &x, cond, &ts)?;
        if t > 1 {
            match noise {
                AncestralNoise::Gaussian => {
                    x += &(normal_matrix(rng, n, x.ncols()) * sched.beta(t).sqrt());
                }
                AncestralNoise::ScaledUniform => {
                    let u = Array2::from_shape_fn(x.dim(), |_| rng.random::<f64>());
                    x += &(u * sched.beta(t));
                }
                AncestralNoise::None => {}
            }
        }
        ensure_finite(&x, "ancestral sampler")?;
    }
    Ok(x)
}

/// `steps` time points evenly spaced from `T` down to 1 (just `[T]` for one step).
pub fn fast_schedule(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > total {
        return Err(Error::Invalid(format!(
            "fast sampler steps must be in 1..={total}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let stride = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| (total as f64 - stride * i as f64).round() as usize)
        .collect())
}

/// Deterministic strided sampler. At each selected time the `x0` estimate is
/// read off the denoiser, and the state jumps to the next selected time along
/// the noise-free posterior mean. Returns the final `x0` estimate.
pub fn fast_sample(
    net: &DenoiserNet,
    cond: &Array2<f64>,
    eps0: &Array2<f64>,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Array2<f64>> {
    net.check_batch(eps0, cond)?;
    let times = fast_schedule(sched.steps(), steps)?;
    let n = eps0.nrows();
    let mut x = eps0.clone();
    for (i, &t) in times.iter().enumerate() {
        let x0 = net.predict_x0(&x, cond, &vec![t; n]);
        match times.get(i + 1) {
            Some(&s) => {
                let (a, b) = sched.jump_coefs(t, s);
                x = x0 * a + &x * b;
                ensure_finite(&x, "fast sampler")?;
            }
            None => {
                ensure_finite(&x0, "fast sampler")?;
                return Ok(x0);
            }
        }
    }
    unreachable!("fast schedule is never empty")
}

/// [`fast_sample`] on the tape, so losses on the sample reach the denoiser.
pub fn fast_sample_tape(
    g: &Graph,
    v: &DenoiserVars,
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    cond: Var,
    eps0: Var,
    steps: usize,
) -> Result<Var> {
    let times = fast_schedule(sched.steps(), steps)?;
    let n = g.shape(eps0).0;
    let mut x = eps0;
    for (i, &t) in times.iter().enumerate() {
        let x0 = net.predict_x0_tape(g, v, x, cond, &vec![t; n]);
        match times.get(i + 1) {
            Some(&s) => {
                let (a, b) = sched.jump_coefs(t, s);
                x = g.add(g.scale(x0, a), g.scale(x, b));
            }
            None => return Ok(x0),
        }
    }
    unreachable!("fast schedule is never empty")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Fits `net` to rows of `x0` given matching rows of `cond`. Returns the mean
/// training loss of each epoch.
pub fn train_denoiser(
    net: &mut DenoiserNet,
    sched: &NoiseSchedule,
    x0: &Array2<f64>,
    cond: &Array2<f64>,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    net.check_batch(x0, cond)?;
    if x0.nrows() == 0 {
        return Err(Error::Empty("train_denoiser"));
    }
    let mut rng = seed::rng(cfg.seed, Stream::Train, 0);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..x0.nrows()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let idx: Rc<[usize]> = Rc::from(chunk.to_vec());
            let bx = x0.select(Axis(0), &idx);
            let bc = cond.select(Axis(0), &idx);
            let ts: Vec<usize> = (0..chunk.len())
                .map(|_| rng.random_range(1..=sched.steps()))
                .collect();
            let eps = normal_matrix(&mut rng, chunk.len(), x0.ncols());
            let g = Graph::new();
            let vars = net.bind_all(&g);
            let v = DenoiserVars::from_slice(&vars);
            let loss = denoising_loss_tape(&g, &v, net, sched, &bx, &bc, &ts, &eps);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "diffusion",
                    epoch,
                    batch: b,
                });
            }
            total += value * chunk.len() as f64;
            let grads: Vec<Array2<f64>> = g
                .grad(loss, &vars)
                .into_iter()
                .map(|v| (*g.value(v)).clone())
                .collect();
            opt.step(net.params_mut(), &grads);
        }
        curve.push(total / x0.nrows() as f64);
    }
    Ok(curve)
}
