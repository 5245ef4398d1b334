//! Cognitive diagnosis models: IRT-2PL and a monotone neural model (NCD).
//!
//! Abilities are stored as raw unconstrained reals. The neural model squashes
//! them through a sigmoid internally, so every initializer and the diffusion
//! sampler live in the same space.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, DomainDataset, DomainId, ExamineeId, QMatrix, QuestionId};
use crate::error::{Error, Result};
use crate::nn::{xavier, Adam, AdamConfig, Parameterized};
use crate::seed::{self, Stream};
use crate::tape::{Graph, Var};

/// Logits are clamped to this magnitude so probabilities stay strictly inside (0, 1).
pub const LOGIT_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CdmKind {
    Irt,
    Ncd,
}

impl std::fmt::Display for CdmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CdmKind::Irt => "irt",
            CdmKind::Ncd => "ncd",
        })
    }
}

impl std::str::FromStr for CdmKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irt" => Ok(CdmKind::Irt),
            "ncd" => Ok(CdmKind::Ncd),
            other => Err(Error::Invalid(format!("unknown CDM kind {other:?}"))),
        }
    }
}

/// An examinee's latent ability in one domain (unsquashed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AbilityVector(pub Vec<f64>);

impl AbilityVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &AbilityVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// 2PL item bank. Discrimination is stored as its logarithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtParams {
    /// `n_questions x 1`
    pub log_discrimination: Array2<f64>,
    /// `n_questions x 1`
    pub difficulty: Array2<f64>,
}

impl IrtParams {
    pub fn discrimination(&self, q: usize) -> f64 {
        self.log_discrimination[[q, 0]].exp()
    }

    pub fn difficulty(&self, q: usize) -> f64 {
        self.difficulty[[q, 0]]
    }

    /// Builds a bank from explicit `(a, b)` pairs; `a` must be positive.
    pub fn from_pairs(items: &[(f64, f64)]) -> Result<Self> {
        if let Some((a, _)) = items.iter().find(|(a, _)| !(*a > 0.0)) {
            return Err(Error::Invalid(format!("discrimination {a} must be > 0")));
        }
        Ok(Self {
            log_discrimination: Array2::from_shape_fn((items.len(), 1), |(q, _)| items[q].0.ln()),
            difficulty: Array2::from_shape_fn((items.len(), 1), |(q, _)| items[q].1),
        })
    }
}

/// Neural cognitive diagnosis parameters.
///
/// `x = mask_q * (sigmoid(theta) - sigmoid(difficulty_q)) * sigmoid(discrimination_q)`
/// feeds a two-layer network with non-negative weights and sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcdParams {
    /// `n_questions x n_concepts`, raw.
    pub difficulty: Array2<f64>,
    /// `n_questions x 1`, raw.
    pub discrimination: Array2<f64>,
    /// `n_concepts x hidden`, kept >= 0.
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    /// `hidden x 1`, kept >= 0.
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    /// Q-matrix mask, `n_questions x n_concepts`; not trained.
    pub mask: Array2<f64>,
}

impl NcdParams {
    pub fn new<R: rand::Rng + ?Sized>(rng: &mut R, q_matrix: &QMatrix, hidden: usize) -> Self {
        let nq = q_matrix.n_questions();
        let k = q_matrix.n_concepts();
        let small = Normal::new(0.0, 0.1).expect("valid normal");
        let mut p = Self {
            difficulty: Array2::from_shape_fn((nq, k), |_| small.sample(rng)),
            discrimination: Array2::from_shape_fn((nq, 1), |_| small.sample(rng)),
            w1: xavier(rng, k, hidden).mapv(f64::abs),
            b1: Array2::zeros((1, hidden)),
            w2: xavier(rng, hidden, 1).mapv(f64::abs),
            b2: Array2::zeros((1, 1)),
            mask: q_matrix.mask(),
        };
        p.project();
        p
    }

    pub fn n_concepts(&self) -> usize {
        self.mask.ncols()
    }

    /// Clamps the interaction weights to be non-negative.
    pub fn project(&mut self) {
        self.w1.mapv_inplace(|w| w.max(0.0));
        self.w2.mapv_inplace(|w| w.max(0.0));
    }

    /// Forward pass and gradients of `log p(r)` for one response.
    fn forward_backward(&self, theta: &[f64], q: usize, r: Option<f64>) -> NcdPass {
        let k = self.n_concepts();
        let hidden = self.w1.ncols();
        let e = sigmoid(self.discrimination[[q, 0]]);
        let s: Vec<f64> = theta.iter().map(|&t| sigmoid(t)).collect();
        let hd: Vec<f64> = (0..k).map(|c| sigmoid(self.difficulty[[q, c]])).collect();
        let x: Vec<f64> = (0..k)
            .map(|c| self.mask[[q, c]] * (s[c] - hd[c]) * e)
            .collect();
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let u: f64 = self.b1[[0, j]] + (0..k).map(|c| x[c] * self.w1[[c, j]]).sum::<f64>();
                sigmoid(u)
            })
            .collect();
        let z_raw = self.b2[[0, 0]] + (0..hidden).map(|j| h[j] * self.w2[[j, 0]]).sum::<f64>();
        let z = z_raw.clamp(-LOGIT_BOUND, LOGIT_BOUND);
        let p = sigmoid(z);
        let Some(r) = r else {
            return NcdPass { p, grad: None };
        };
        let dz = if z_raw.abs() > LOGIT_BOUND { 0.0 } else { r - p };
        let dh: Vec<f64> = (0..hidden).map(|j| dz * self.w2[[j, 0]]).collect();
        let du: Vec<f64> = (0..hidden).map(|j| dh[j] * h[j] * (1.0 - h[j])).collect();
        let dx: Vec<f64> = (0..k)
            .map(|c| (0..hidden).map(|j| self.w1[[c, j]] * du[j]).sum())
            .collect();
        let dtheta: Vec<f64> = (0..k)
            .map(|c| dx[c] * self.mask[[q, c]] * e * s[c] * (1.0 - s[c]))
            .collect();
        let ddiff: Vec<f64> = (0..k)
            .map(|c| -dx[c] * self.mask[[q, c]] * e * hd[c] * (1.0 - hd[c]))
            .collect();
        let de: f64 = (0..k).map(|c| dx[c] * self.mask[[q, c]] * (s[c] - hd[c])).sum();
        NcdPass {
            p,
            grad: Some(NcdGrad {
                theta: dtheta,
                difficulty: ddiff,
                discrimination: de * e * (1.0 - e),
                x,
                du,
                h,
                dz,
            }),
        }
    }
}

struct NcdPass {
    p: f64,
    grad: Option<NcdGrad>,
}

/// Per-response gradient of the log-likelihood.
struct NcdGrad {
    theta: Vec<f64>,
    difficulty: Vec<f64>,
    discrimination: f64,
    x: Vec<f64>,
    du: Vec<f64>,
    h: Vec<f64>,
    dz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ItemParams {
    Irt(IrtParams),
    Ncd(NcdParams),
}

impl Parameterized for ItemParams {
    fn params(&self) -> Vec<&Array2<f64>> {
        match self {
            ItemParams::Irt(p) => vec![&p.log_discrimination, &p.difficulty],
            ItemParams::Ncd(p) => vec![&p.difficulty, &p.discrimination, &p.w1, &p.b1, &p.w2, &p.b2],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match self {
            ItemParams::Irt(p) => vec![&mut p.log_discrimination, &mut p.difficulty],
            ItemParams::Ncd(p) => vec![
                &mut p.difficulty,
                &mut p.discrimination,
                &mut p.w1,
                &mut p.b1,
                &mut p.w2,
                &mut p.b2,
            ],
        }
    }
}

impl ItemParams {
    pub fn kind(&self) -> CdmKind {
        match self {
            ItemParams::Irt(_) => CdmKind::Irt,
            ItemParams::Ncd(_) => CdmKind::Ncd,
        }
    }

    pub fn n_questions(&self) -> usize {
        match self {
            ItemParams::Irt(p) => p.difficulty.nrows(),
            ItemParams::Ncd(p) => p.difficulty.nrows(),
        }
    }

    pub fn ability_dim(&self) -> usize {
        match self {
            ItemParams::Irt(_) => 1,
            ItemParams::Ncd(p) => p.n_concepts(),
        }
    }

    /// Re-applies parameter constraints after an optimizer step.
    pub fn project(&mut self) {
        if let ItemParams::Ncd(p) = self {
            p.project();
        }
    }

    fn prob_unchecked(&self, theta: &[f64], q: usize) -> f64 {
        match self {
            ItemParams::Irt(p) => {
                let z = p.discrimination(q) * (theta[0] - p.difficulty(q));
                sigmoid(z.clamp(-LOGIT_BOUND, LOGIT_BOUND))
            }
            ItemParams::Ncd(p) => p.forward_backward(theta, q, None).p,
        }
    }

    /// `(p, d log p(r) / d theta)` for one response.
    fn loglik_grad_one(&self, theta: &[f64], q: usize, r: f64) -> (f64, Vec<f64>) {
        match self {
            ItemParams::Irt(p) => {
                let a = p.discrimination(q);
                let z = a * (theta[0] - p.difficulty(q));
                let prob = sigmoid(z.clamp(-LOGIT_BOUND, LOGIT_BOUND));
                let g = if z.abs() > LOGIT_BOUND { 0.0 } else { a * (r - prob) };
                (prob, vec![g])
            }
            ItemParams::Ncd(p) => {
                let pass = p.forward_backward(theta, q, Some(r));
                (pass.p, pass.grad.expect("gradient requested").theta)
            }
        }
    }

    /// Tape forward: probabilities (`n x 1`) for ability rows `theta` and
    /// question indices `questions`. `vars` come from [`Parameterized::bind_all`].
    pub fn forward_tape(&self, g: &Graph, vars: &[Var], theta: Var, questions: &Rc<[usize]>) -> Var {
        let z = match self {
            ItemParams::Irt(_) => {
                let a = g.exp(g.gather(vars[0], Rc::clone(questions)));
                let b = g.gather(vars[1], Rc::clone(questions));
                g.mul(a, g.sub(theta, b))
            }
            ItemParams::Ncd(p) => {
                let k = p.n_concepts();
                let mut mask = Array2::zeros((questions.len(), k));
                for (row, &q) in questions.iter().enumerate() {
                    mask.row_mut(row).assign(&p.mask.row(q));
                }
                let mask = g.constant(mask);
                let s = g.sigmoid(theta);
                let hd = g.sigmoid(g.gather(vars[0], Rc::clone(questions)));
                let e = g.sigmoid(g.gather(vars[1], Rc::clone(questions)));
                let x = g.mul_col(g.mul(mask, g.sub(s, hd)), e);
                let h = g.sigmoid(g.add_row(g.matmul(x, vars[2]), vars[3]));
                g.add_row(g.matmul(h, vars[4]), vars[5])
            }
        };
        g.sigmoid(g.clamp(z, -LOGIT_BOUND, LOGIT_BOUND))
    }
}

/// Step budget of the per-session ability update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub steps: usize,
    pub step_size: f64,
    pub clip_norm: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: 0.05,
            clip_norm: 5.0,
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("mle step_size and clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden width of the NCD interaction network.
    pub ncd_hidden: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.002,
            ncd_hidden: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.ncd_hidden == 0 {
            return Err(Error::Invalid("pretrain epochs, batch_size and ncd_hidden must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid("pretrain lr must be > 0".into()));
        }
        Ok(())
    }
}

/// A trained model: item bank plus the abilities it was fitted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cdm {
    pub domain: DomainId,
    pub params: ItemParams,
    pub abilities: BTreeMap<ExamineeId, AbilityVector>,
}

const CDM_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CdmFile {
    version: u32,
    #[serde(flatten)]
    model: Cdm,
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        grad.iter_mut().for_each(|g| *g *= max_norm / norm);
    }
}

impl Cdm {
    pub fn kind(&self) -> CdmKind {
        self.params.kind()
    }

    pub fn ability_dim(&self) -> usize {
        self.params.ability_dim()
    }

    pub fn n_questions(&self) -> usize {
        self.params.n_questions()
    }

    pub fn ability(&self, e: ExamineeId) -> Option<&AbilityVector> {
        self.abilities.get(&e)
    }

    fn check(&self, theta: &[f64], q: QuestionId) -> Result<()> {
        if theta.len() != self.ability_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ability_dim(),
                got: theta.len(),
            });
        }
        if q.index() >= self.n_questions() {
            return Err(Error::UnknownQuestion {
                domain: self.domain,
                question: q,
            });
        }
        Ok(())
    }

    /// Probability of a correct answer to `q` at ability `theta`.
    pub fn predict_prob(&self, theta: &[f64], q: QuestionId) -> Result<f64> {
        self.check(theta, q)?;
        Ok(self.params.prob_unchecked(theta, q.index()))
    }

    /// Log-likelihood of `evidence` at `theta`.
    pub fn loglik(&self, theta: &[f64], evidence: &[(QuestionId, bool)]) -> Result<f64> {
        let mut ll = 0.0;
        for &(q, r) in evidence {
            let p = self.predict_prob(theta, q)?;
            ll += if r { p.ln() } else { (1.0 - p).ln() };
        }
        Ok(ll)
    }

    /// Analytic gradient of [`Cdm::loglik`] with respect to `theta`.
    /// For IRT this is `sum_q a_q (r_q - p_q)`.
    pub fn loglik_grad(&self, theta: &[f64], evidence: &[(QuestionId, bool)]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.ability_dim()];
        for &(q, r) in evidence {
            self.check(theta, q)?;
            let (_, g) = self
                .params
                .loglik_grad_one(theta, q.index(), if r { 1.0 } else { 0.0 });
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(grad)
    }

    /// Clipped gradient ascent on the evidence log-likelihood from `theta0`,
    /// with item parameters frozen.
    pub fn update_ability_mle(
        &self,
        theta0: &AbilityVector,
        evidence: &[(QuestionId, bool)],
        cfg: &MleConfig,
    ) -> Result<AbilityVector> {
        let mut theta = theta0.0.clone();
        for _ in 0..cfg.steps {
            let mut g = self.loglik_grad(&theta, evidence)?;
            clip(&mut g, cfg.clip_norm);
            theta.iter_mut().zip(&g).for_each(|(t, g)| *t += cfg.step_size * g);
        }
        Ok(AbilityVector(theta))
    }

    /// Fits abilities for new examinees with the item bank frozen, by Adam on
    /// each examinee's mean cross-entropy. Starts from the zero vector.
    pub fn fit_abilities(
        &self,
        logs: &[crate::data::ResponseTriple],
        steps: usize,
        lr: f64,
    ) -> Result<BTreeMap<ExamineeId, AbilityVector>> {
        let mut grouped: BTreeMap<ExamineeId, Vec<(QuestionId, bool)>> = BTreeMap::new();
        for r in logs {
            grouped.entry(r.examinee).or_default().push((r.question, r.correct));
        }
        let mut out = BTreeMap::new();
        for (e, evidence) in grouped {
            let n = evidence.len() as f64;
            let mut theta = Array2::zeros((1, self.ability_dim()));
            let mut opt = Adam::new(AdamConfig {
                lr,
                ..Default::default()
            });
            for _ in 0..steps {
                let g = self.loglik_grad(theta.as_slice().expect("contiguous"), &evidence)?;
                let grad = Array2::from_shape_fn((1, g.len()), |(_, c)| -g[c] / n);
                opt.step(vec![&mut theta], &[grad]);
            }
            out.insert(e, AbilityVector(theta.into_raw_vec_and_offset().0));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CdmFile {
            version: CDM_FILE_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CdmFile = serde_json::from_str(s)?;
        if file.version != CDM_FILE_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: CDM_FILE_VERSION,
            });
        }
        Ok(file.model)
    }
}

/// Result of pretraining: the model and its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub cdm: Cdm,
    pub losses: Vec<f64>,
}

fn bce(p: f64, r: f64) -> f64 {
    -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
}

/// Jointly fits item parameters and abilities on `dataset.logs` by
/// minibatch Adam on binary cross-entropy.
pub fn pretrain(dataset: &DomainDataset, kind: CdmKind, cfg: &PretrainConfig) -> Result<Pretrained> {
    if dataset.logs.is_empty() {
        return Err(Error::Empty("pretrain"));
    }
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, Stream::Pretrain, u64::from(dataset.domain.0));
    let examinees: Vec<ExamineeId> = dataset.examinees().into_iter().collect();
    let index: BTreeMap<ExamineeId, usize> =
        examinees.iter().enumerate().map(|(i, e)| (*e, i)).collect();
    let nq = dataset.n_questions();

    let mut params = match kind {
        CdmKind::Irt => {
            let small = Normal::new(0.0, 0.1).expect("valid normal");
            ItemParams::Irt(IrtParams {
                log_discrimination: Array2::zeros((nq, 1)),
                difficulty: Array2::from_shape_fn((nq, 1), |_| small.sample(&mut rng)),
            })
        }
        CdmKind::Ncd => ItemParams::Ncd(NcdParams::new(&mut rng, &dataset.q_matrix, cfg.ncd_hidden)),
    };
    let dim = params.ability_dim();
    let small = Normal::new(0.0, 0.1).expect("valid normal");
    let mut abilities = Array2::from_shape_fn((examinees.len(), dim), |_| small.sample(&mut rng));

    let rows: Vec<(usize, usize, f64)> = dataset
        .logs
        .iter()
        .map(|r| (index[&r.examinee], r.question.index(), r.label()))
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_theta = Array2::<f64>::zeros(abilities.dim());
            let mut grads: Vec<Array2<f64>> =
                params.params().iter().map(|p| Array2::zeros(p.dim())).collect();
            let scale = -1.0 / chunk.len() as f64;
            for &i in chunk {
                let (e, q, r) = rows[i];
                let theta = abilities.row(e).to_vec();
                accumulate_item_grads(&params, &theta, q, r, scale, &mut grads, &mut grad_theta, e);
            }
            let mut all = vec![&mut abilities];
            all.extend(params.params_mut());
            grads.insert(0, grad_theta);
            opt.step(all, &grads);
            params.project();
            if abilities.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    stage: "pretrain",
                    epoch,
                    batch: b,
                });
            }
        }
        let loss = rows
            .iter()
            .map(|&(e, q, r)| {
                let theta = abilities.row(e).to_vec();
                bce(params.prob_unchecked(&theta, q), r)
            })
            .sum::<f64>()
            / rows.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "pretrain",
                epoch,
                batch: 0,
            });
        }
        log::debug!("pretrain domain {} epoch {epoch}: loss {loss:.5}", dataset.domain);
        losses.push(loss);
    }

    let abilities = examinees
        .iter()
        .enumerate()
        .map(|(i, e)| (*e, AbilityVector(abilities.row(i).to_vec())))
        .collect();
    Ok(Pretrained {
        cdm: Cdm {
            domain: dataset.domain,
            params,
            abilities,
        },
        losses,
    })
}

/// Adds `scale * d log p(r) / d params` for one response into `grads`
/// (item parameters, in `params()` order) and row `e` of `grad_theta`.
#[allow(clippy::too_many_arguments)]
fn accumulate_item_grads(
    params: &ItemParams,
    theta: &[f64],
    q: usize,
    r: f64,
    scale: f64,
    grads: &mut [Array2<f64>],
    grad_theta: &mut Array2<f64>,
    e: usize,
) {
    match params {
        ItemParams::Irt(p) => {
            let a = p.discrimination(q);
            let diff = theta[0] - p.difficulty(q);
            let z = a * diff;
            if z.abs() > LOGIT_BOUND {
                return;
            }
            let resid = r - sigmoid(z);
            grad_theta[[e, 0]] += scale * a * resid;
            grads[0][[q, 0]] += scale * resid * z;
            grads[1][[q, 0]] -= scale * a * resid;
        }
        ItemParams::Ncd(p) => {
            let pass = p.forward_backward(theta, q, Some(r));
            let g = pass.grad.expect("gradient requested");
            for (c, v) in g.theta.iter().enumerate() {
                grad_theta[[e, c]] += scale * v;
            }
            for (c, v) in g.difficulty.iter().enumerate() {
                grads[0][[q, c]] += scale * v;
            }
            grads[1][[q, 0]] += scale * g.discrimination;
            let hidden = g.du.len();
            for (c, xc) in g.x.iter().enumerate() {
                if *xc == 0.0 {
                    continue;
                }
                for j in 0..hidden {
                    grads[2][[c, j]] += scale * xc * g.du[j];
                }
            }
            for j in 0..hidden {
                grads[3][[0, j]] += scale * g.du[j];
                grads[4][[j, 0]] += scale * g.h[j] * g.dz;
            }
            grads[5][[0, 0]] += scale * g.dz;
        }
    }
}

/// Probabilities for many (ability, question) pairs at once.
pub fn predict_many(cdm: &Cdm, theta: &AbilityVector, questions: &[QuestionId]) -> Result<Array1<f64>> {
    questions
        .iter()
        .map(|&q| cdm.predict_prob(theta.as_slice(), q))
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, pearson, ConceptId, ResponseTriple, SyntheticConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn irt(items: &[(f64, f64)]) -> Cdm {
        Cdm {
            domain: DomainId(0),
            params: ItemParams::Irt(IrtParams::from_pairs(items).unwrap()),
            abilities: BTreeMap::new(),
        }
    }

    fn ncd(seed: u64, nq: usize, k: usize) -> Cdm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = QMatrix::new(
            (0..nq)
                .map(|j| {
                    let mut cs = vec![ConceptId((j % k) as u32)];
                    if j % 3 == 0 {
                        cs.push(ConceptId(((j + 1) % k) as u32));
                    }
                    cs
                })
                .collect(),
        )
        .unwrap();
        let mut p = NcdParams::new(&mut rng, &q, 6);
        p.difficulty.mapv_inplace(|v| v * 10.0);
        p.discrimination.mapv_inplace(|v| v * 10.0);
        p.b1.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p.b2[[0, 0]] = -0.5;
        Cdm {
            domain: DomainId(0),
            params: ItemParams::Ncd(p),
            abilities: BTreeMap::new(),
        }
    }

    #[test]
    fn irt_probabilities() {
        let m = irt(&[(1.0, 0.0), (2.0, 1.0)]);
        assert_eq!(m.predict_prob(&[0.0], QuestionId(0)).unwrap(), 0.5);
        assert!((m.predict_prob(&[1.0], QuestionId(1)).unwrap() - 0.5).abs() < 1e-15);
        let oracle = 1.0 / (1.0 + (-2.0f64).exp());
        let p = m.predict_prob(&[2.0], QuestionId(0)).unwrap();
        assert!((p - oracle).abs() < 1e-12);
        assert!((p - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn prediction_errors() {
        let m = irt(&[(1.0, 0.0)]);
        assert!(matches!(
            m.predict_prob(&[0.0], QuestionId(3)),
            Err(Error::UnknownQuestion { .. })
        ));
        assert!(matches!(
            m.predict_prob(&[0.0, 1.0], QuestionId(0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn irt_gradient_examples() {
        let m = irt(&[(1.0, 0.0)]);
        assert_eq!(m.loglik_grad(&[0.0], &[(QuestionId(0), true)]).unwrap(), vec![0.5]);
        assert_eq!(m.loglik_grad(&[0.0], &[(QuestionId(0), false)]).unwrap(), vec![-0.5]);
    }

    fn fd_grad(m: &Cdm, theta: &[f64], ev: &[(QuestionId, bool)]) -> Vec<f64> {
        let h = 1e-5;
        (0..theta.len())
            .map(|i| {
                let mut up = theta.to_vec();
                let mut dn = theta.to_vec();
                up[i] += h;
                dn[i] -= h;
                (m.loglik(&up, ev).unwrap() - m.loglik(&dn, ev).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt())
            .max(1e-8);
        diff / scale
    }

    #[test]
    fn ncd_gradient_matches_finite_differences() {
        let m = ncd(3, 12, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ev: Vec<(QuestionId, bool)> = (0..5)
                .map(|_| (QuestionId(rng.random_range(0..12)), rng.random_bool(0.5)))
                .collect();
            let a = m.loglik_grad(&theta, &ev).unwrap();
            let n = fd_grad(&m, &theta, &ev);
            assert!(rel_err(&a, &n) < 1e-4, "{a:?} vs {n:?}");
        }
    }

    #[test]
    fn mle_moves_toward_evidence() {
        let m = irt(&[(1.0, 0.0), (1.0, 0.0)]);
        let cfg = MleConfig::default();
        let up = m
            .update_ability_mle(&AbilityVector::zeros(1), &[(QuestionId(0), true)], &cfg)
            .unwrap();
        assert!(up.0[0] > 0.0);
        let balanced = m
            .update_ability_mle(
                &AbilityVector::zeros(1),
                &[(QuestionId(0), true), (QuestionId(1), false)],
                &cfg,
            )
            .unwrap();
        assert!(balanced.0[0].abs() < cfg.step_size);
    }

    #[test]
    fn mle_recovers_a_known_ability() {
        // Twenty informative items around the true ability theta* = 1.
        let items: Vec<(f64, f64)> = (0..20).map(|j| (2.0, 0.5 + j as f64 * 0.05)).collect();
        let m = irt(&items);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ev: Vec<(QuestionId, bool)> = (0..20)
            .map(|j| {
                let p = m.predict_prob(&[1.0], QuestionId(j)).unwrap();
                (QuestionId(j), rng.random_bool(p))
            })
            .collect();
        let est = m
            .update_ability_mle(&AbilityVector::zeros(1), &ev, &MleConfig::default())
            .unwrap();
        assert!((est.0[0] - 1.0).abs() < 0.3, "{est:?}");
    }

    #[test]
    fn pretrain_on_all_correct_data() {
        let q = QMatrix::new((0..5).map(|_| vec![ConceptId(0)]).collect()).unwrap();
        let logs: Vec<ResponseTriple> = (0..20)
            .flat_map(|e| {
                (0..5).map(move |j| ResponseTriple {
                    examinee: ExamineeId(e),
                    question: QuestionId(j),
                    correct: true,
                })
            })
            .collect();
        let ds = DomainDataset::new(DomainId(0), q, logs).unwrap();
        for kind in [CdmKind::Irt, CdmKind::Ncd] {
            let cfg = PretrainConfig {
                epochs: 60,
                lr: 0.05,
                ..Default::default()
            };
            let out = pretrain(&ds, kind, &cfg).unwrap();
            assert!(out.losses.last() <= out.losses.first());
            for r in &ds.logs {
                let theta = out.cdm.ability(r.examinee).unwrap();
                let p = out.cdm.predict_prob(theta.as_slice(), r.question).unwrap();
                assert!(p >= 0.9, "{kind}: {p}");
            }
        }
    }

    #[test]
    fn pretrain_is_deterministic_and_recovers_abilities() {
        let (data, truth) = generate_synthetic(&SyntheticConfig {
            n_examinees: 300,
            n_domains: 1,
            items_per_domain: 60,
            ..Default::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            epochs: 15,
            ..Default::default()
        };
        let a = pretrain(&data[0], CdmKind::Irt, &cfg).unwrap();
        let b = pretrain(&data[0], CdmKind::Irt, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        let best = a.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(a.losses[a.losses.len() - 1] < best + 1e-3, "{:?}", a.losses);
        assert!(a.losses[a.losses.len() - 1] < a.losses[0]);
        let (est, tru): (Vec<f64>, Vec<f64>) = a
            .cdm
            .abilities
            .iter()
            .map(|(e, v)| (v.0[0], truth.scalar_ability(DomainId(0), *e)))
            .unzip();
        assert!(pearson(&est, &tru) > 0.85);
    }

    #[test]
    fn ncd_weights_stay_non_negative() {
        let (data, _) = generate_synthetic(&SyntheticConfig {
            n_examinees: 100,
            n_domains: 1,
            items_per_domain: 30,
            ..Default::default()
        })
        .unwrap();
        let out = pretrain(
            &data[0],
            CdmKind::Ncd,
            &PretrainConfig {
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let ItemParams::Ncd(p) = &out.cdm.params else {
            unreachable!()
        };
        assert!(p.w1.iter().chain(p.w2.iter()).all(|&w| w >= 0.0));
    }

    #[test]
    fn tape_forward_matches_plain_prediction() {
        for m in [irt(&[(1.3, 0.2), (0.7, -1.0), (2.0, 0.5)]), ncd(5, 3, 4)] {
            let dim = m.ability_dim();
            let theta = Array2::from_shape_fn((3, dim), |(r, c)| 0.3 * r as f64 - 0.2 * c as f64);
            let g = Graph::new();
            let vars = m.params.bind_all(&g);
            let t = g.constant(theta.clone());
            let qs: Rc<[usize]> = Rc::from(vec![2, 0, 1]);
            let p = g.value(m.params.forward_tape(&g, &vars, t, &qs));
            for r in 0..3 {
                let plain = m
                    .predict_prob(theta.row(r).as_slice().unwrap(), QuestionId(qs[r] as u32))
                    .unwrap();
                assert!((p[[r, 0]] - plain).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m = ncd(2, 5, 3);
        let back = Cdm::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn probabilities_stay_strictly_inside_unit_interval(
            theta in -1e6f64..1e6, a in 0.01f64..50.0, b in -1e3f64..1e3
        ) {
            let m = irt(&[(a, b)]);
            let p = m.predict_prob(&[theta], QuestionId(0)).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn ncd_is_monotone_in_mastery(
            base in proptest::collection::vec(-3.0f64..3.0, 4),
            bump in proptest::collection::vec(0.0f64..2.0, 4),
            q in 0usize..12,
        ) {
            let m = ncd(8, 12, 4);
            let higher: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let lo = m.predict_prob(&base, QuestionId(q as u32)).unwrap();
            let hi = m.predict_prob(&higher, QuestionId(q as u32)).unwrap();
            prop_assert!(hi >= lo);
            prop_assert!(lo > 0.0 && hi < 1.0);
        }
    }
}
