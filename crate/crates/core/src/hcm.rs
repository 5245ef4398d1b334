//! Joint training of the encoders and the conditional denoiser, and target
//! ability generation from a trained artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cdm::{AbilityVector, Cdm, ItemParams};
use crate::csum::{loss_orth, Csum, CsumBatch, LogRows};
use crate::data::{DomainId, ExamineeId, ResponseTriple};
use crate::diffusion::{
    ancestral_sample, denoising_loss_tape, fast_sample, fast_sample_tape, DenoiserConfig, DenoiserNet,
    DenoiserVars, NoiseSchedule, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Parameterized};
use crate::seed::{self, Stream};
use crate::tape::{Graph, Var};

/// Probabilities are clamped to `[P_FLOOR, 1 - P_FLOOR]` inside the task loss.
pub const P_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub diffusion: f64,
    pub shared: f64,
    pub specific: f64,
    pub orth: f64,
    pub consistency: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diffusion: 1.0,
            shared: 1.0,
            specific: 1.0,
            orth: 0.1,
            consistency: 0.5,
            task: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.diffusion,
            self.shared,
            self.specific,
            self.orth,
            self.consistency,
            self.task,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcsrConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden width of the shared, specific and fusion networks.
    pub encoder_hidden: usize,
    /// Hidden width of the denoiser; `None` means four times the ability dim.
    pub denoiser_hidden: Option<usize>,
    pub time_dim: usize,
    pub tau: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Strided sampler steps used by the consistency and task losses.
    pub train_sampler_steps: usize,
    /// Sampler used to generate abilities at inference.
    pub sampler: SamplerConfig,
    /// Responses drawn per examinee and domain for each batch.
    pub logs_per_domain: usize,
    pub seed: u64,
}

impl Default for DcsrConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epochs: 300,
            batch_size: 256,
            lr: 1e-3,
            encoder_hidden: 16,
            denoiser_hidden: None,
            time_dim: 16,
            tau: 0.5,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            train_sampler_steps: 30,
            sampler: SamplerConfig::default(),
            logs_per_domain: 20,
            seed: 0,
        }
    }
}

impl DcsrConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.logs_per_domain == 0 {
            return Err(Error::Invalid("epochs, batch_size and logs_per_domain must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Invalid("lr and tau must be > 0".into()));
        }
        if self.encoder_hidden == 0 || self.denoiser_hidden == Some(0) || self.time_dim < 2 {
            return Err(Error::Invalid("network widths must be positive".into()));
        }
        let sched = self.schedule()?;
        if self.train_sampler_steps == 0 || self.train_sampler_steps > sched.steps() {
            return Err(Error::Invalid(format!(
                "train_sampler_steps must be in 1..={}",
                sched.steps()
            )));
        }
        self.sampler.validate(&sched)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

/// Batch mean of squared distances, divided by the dimension.
pub fn consistency_loss(generated: &Array2<f64>, pretrained: &Array2<f64>) -> f64 {
    (generated - pretrained).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn task_loss(probs: &[f64], labels: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &r)| {
            let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
            -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / probs.len() as f64
}

/// Tape form of [`consistency_loss`].
pub fn consistency_loss_tape(g: &Graph, generated: Var, pretrained: Var) -> Var {
    g.mean(g.square(g.sub(pretrained, generated)))
}

/// Tape form of [`task_loss`]: BCE of the frozen model's predictions at the
/// generated abilities, gathered per log row.
pub fn task_loss_tape(g: &Graph, frozen: &ItemParams, frozen_vars: &[Var], generated: Var, logs: &LogRows) -> Var {
    if logs.is_empty() {
        return g.zeros(1, 1);
    }
    let theta = g.gather(generated, Rc::clone(&logs.rows));
    let p = g.clamp(
        frozen.forward_tape(g, frozen_vars, theta, &logs.questions),
        P_FLOOR,
        1.0 - P_FLOOR,
    );
    let r = g.constant(logs.labels.clone());
    let one_minus_r = g.constant(logs.labels.mapv(|v| 1.0 - v));
    let ll = g.add(
        g.mul(r, g.ln(p)),
        g.mul(one_minus_r, g.ln(g.offset(g.scale(p, -1.0), 1.0))),
    );
    g.scale(g.mean(ll), -1.0)
}

/// Mean of each loss over one epoch (unweighted), and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub diffusion: f64,
    pub shared: f64,
    pub specific: f64,
    /// Gradient cosine magnitude; logged even when its weight is zero.
    pub orth: f64,
    pub consistency: f64,
    pub task: f64,
}

pub const ARTIFACT_VERSION: u32 = 1;

/// Everything needed to generate target abilities for new examinees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcsrArtifact {
    pub version: u32,
    pub target: DomainId,
    pub sources: Vec<DomainId>,
    pub config: DcsrConfig,
    pub csum: Csum,
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    /// Mean warm target ability, used in place of the unknown target ability.
    pub target_substitute: AbilityVector,
    /// Mean ability per source domain, used when an examinee lacks that source.
    pub source_means: BTreeMap<DomainId, AbilityVector>,
    /// SHA-256 of each frozen pretrained model used in training.
    pub pretrained_checksums: BTreeMap<DomainId, String>,
    pub history: Vec<EpochLog>,
}

/// SHA-256 over a model's serialized item parameters.
pub fn params_checksum(cdm: &Cdm) -> Result<String> {
    let json = serde_json::to_vec(&cdm.params)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

fn mean_ability<'a>(it: impl Iterator<Item = &'a AbilityVector>, dim: usize) -> AbilityVector {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in it {
        acc.iter_mut().zip(&v.0).for_each(|(a, b)| *a += b);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    AbilityVector(acc)
}

/// A pretrained source model with the response logs it was fitted on.
pub struct SourceInput<'a> {
    pub cdm: &'a Cdm,
    pub logs: &'a [ResponseTriple],
}

fn group_logs(logs: &[ResponseTriple]) -> BTreeMap<ExamineeId, Vec<(usize, f64)>> {
    let mut out: BTreeMap<ExamineeId, Vec<(usize, f64)>> = BTreeMap::new();
    for r in logs {
        out.entry(r.examinee).or_default().push((r.question.index(), r.label()));
    }
    out
}

fn sample_rows<R: Rng + ?Sized>(
    rng: &mut R,
    chunk: &[ExamineeId],
    logs: &BTreeMap<ExamineeId, Vec<(usize, f64)>>,
    per: usize,
) -> LogRows {
    let mut entries = Vec::new();
    for (row, e) in chunk.iter().enumerate() {
        if let Some(all) = logs.get(e) {
            for &(q, r) in all.choose_multiple(rng, per.min(all.len())) {
                entries.push((row, q, r));
            }
        }
    }
    LogRows::new(&entries)
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((flat.len() / dim.max(1), dim), flat).expect("rectangular")
}

fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Trains encoders and denoiser on examinees that have a pretrained ability
/// in the target and in every source domain. Pretrained models are read only.
pub fn train_dcsr(
    target: &Cdm,
    target_logs: &[ResponseTriple],
    sources: &[SourceInput<'_>],
    cfg: &DcsrConfig,
) -> Result<DcsrArtifact> {
    cfg.validate()?;
    let dim = target.ability_dim();
    let mut overlap: BTreeSet<ExamineeId> = target.abilities.keys().copied().collect();
    for s in sources {
        overlap.retain(|e| s.cdm.abilities.contains_key(e));
    }
    if overlap.is_empty() {
        return Err(Error::Empty("train_dcsr: no examinee has every pretrained ability"));
    }
    let overlap: Vec<ExamineeId> = overlap.into_iter().collect();
    let sched = cfg.schedule()?;

    let mut init_rng = seed::rng(cfg.seed, Stream::Train, 0);
    let source_cdms: Vec<&Cdm> = sources.iter().map(|s| s.cdm).collect();
    let mut csum = Csum::new(&mut init_rng, target, &source_cdms, cfg.encoder_hidden, cfg.tau)?;
    let mut den_cfg = DenoiserConfig::new(dim, dim);
    den_cfg.time_dim = cfg.time_dim;
    if let Some(h) = cfg.denoiser_hidden {
        den_cfg.hidden = h;
    }
    let mut denoiser = DenoiserNet::new(&mut init_rng, den_cfg);

    let target_grouped = group_logs(target_logs);
    let source_grouped: Vec<_> = sources.iter().map(|s| group_logs(s.logs)).collect();
    let frozen = &target.params;

    let mut rng = seed::rng(cfg.seed, Stream::Train, 1);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let warm: BTreeSet<ExamineeId> = target_grouped.keys().copied().collect();
    let target_substitute = mean_ability(
        target
            .abilities
            .iter()
            .filter(|(e, _)| warm.contains(e))
            .map(|(_, v)| v),
        dim,
    );
    let mut order = overlap.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let w = cfg.weights;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochLog::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let n = chunk.len();
            let batch = CsumBatch {
                theta_target: stack(chunk.iter().map(|e| target.abilities[e].0.clone()), dim),
                theta_sources: sources
                    .iter()
                    .map(|s| stack(chunk.iter().map(|e| s.cdm.abilities[e].0.clone()), s.cdm.ability_dim()))
                    .collect(),
                target_logs: sample_rows(&mut rng, chunk, &target_grouped, cfg.logs_per_domain),
                source_logs: source_grouped
                    .iter()
                    .map(|l| sample_rows(&mut rng, chunk, l, cfg.logs_per_domain))
                    .collect(),
            };
            let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
            let eps = normal(&mut rng, n, dim);
            let eps0 = normal(&mut rng, n, dim);

            let g = Graph::new();
            let cv = csum.bind(&g);
            let dv_all = denoiser.bind_all(&g);
            let dv = DenoiserVars::from_slice(&dv_all);
            let frozen_vars: Vec<Var> = frozen.params().into_iter().map(|p| g.constant(p.clone())).collect();

            let tt = g.constant(batch.theta_target.clone());
            let ts_vars: Vec<Var> = batch.theta_sources.iter().map(|x| g.constant(x.clone())).collect();
            let fwd = csum.forward_tape(&g, &cv, tt, &ts_vars);
            let l1 = csum.loss_shared(&g, &cv, &fwd, &batch);
            let l2 = csum.loss_specific(&g, &cv, &fwd, &batch, tt);
            let l3 = loss_orth(&g, l1, &cv.shared_params(), l2, &cv.specific_params());

            let share = (*g.value(fwd.share)).clone();
            let spec = (*g.value(fwd.spec)).clone();
            let ldiff = denoising_loss_tape(&g, &dv, &denoiser, &sched, &spec, &share, &ts, &eps);
            let cond = g.constant(share);
            let generated = fast_sample_tape(
                &g,
                &dv,
                &denoiser,
                &sched,
                cond,
                g.constant(eps0),
                cfg.train_sampler_steps,
            )?;
            let lcc = consistency_loss_tape(&g, generated, tt);
            let ltc = task_loss_tape(&g, frozen, &frozen_vars, generated, &batch.target_logs);

            let mut total = g.zeros(1, 1);
            for (weight, term) in [
                (w.diffusion, ldiff),
                (w.shared, l1),
                (w.specific, l2),
                (w.orth, l3),
                (w.consistency, lcc),
                (w.task, ltc),
            ] {
                if weight > 0.0 {
                    total = g.add(total, g.scale(term, weight));
                }
            }
            let value = g.scalar(total);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "dcsr",
                    epoch,
                    batch: b,
                });
            }
            sums.total += value;
            sums.diffusion += g.scalar(ldiff);
            sums.shared += g.scalar(l1);
            sums.specific += g.scalar(l2);
            sums.orth += g.scalar(l3);
            sums.consistency += g.scalar(lcc);
            sums.task += g.scalar(ltc);
            batches += 1;

            let mut wrt = cv.all();
            wrt.extend(&dv_all);
            let grads: Vec<Array2<f64>> = g
                .grad(total, &wrt)
                .into_iter()
                .map(|v| (*g.value(v)).clone())
                .collect();
            if grads.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    stage: "dcsr",
                    epoch,
                    batch: b,
                });
            }
            let mut params = csum.params_mut();
            params.extend(denoiser.params_mut());
            opt.step(params, &grads);
            csum.target_head.project();
            csum.source_heads.iter_mut().for_each(ItemParams::project);
        }
        let k = batches as f64;
        let log = EpochLog {
            epoch,
            total: sums.total / k,
            diffusion: sums.diffusion / k,
            shared: sums.shared / k,
            specific: sums.specific / k,
            orth: sums.orth / k,
            consistency: sums.consistency / k,
            task: sums.task / k,
        };
        log::debug!("dcsr epoch {epoch}: {log:?}");
        history.push(log);
    }

    let mut pretrained_checksums = BTreeMap::new();
    pretrained_checksums.insert(target.domain, params_checksum(target)?);
    for s in sources {
        pretrained_checksums.insert(s.cdm.domain, params_checksum(s.cdm)?);
    }
    let source_means = sources
        .iter()
        .map(|s| {
            (
                s.cdm.domain,
                mean_ability(s.cdm.abilities.values(), s.cdm.ability_dim()),
            )
        })
        .collect();
    Ok(DcsrArtifact {
        version: ARTIFACT_VERSION,
        target: target.domain,
        sources: csum.sources.clone(),
        config: cfg.clone(),
        csum,
        denoiser,
        schedule: sched,
        target_substitute,
        source_means,
        pretrained_checksums,
        history,
    })
}

impl DcsrArtifact {
    pub fn dim(&self) -> usize {
        self.csum.dim()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let found = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if found != ARTIFACT_VERSION {
            return Err(Error::Version {
                found,
                expected: ARTIFACT_VERSION,
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    /// Source abilities for one examinee in artifact order; a missing source
    /// falls back to that source's mean ability.
    pub fn source_row(&self, sources: &BTreeMap<DomainId, AbilityVector>) -> Result<Vec<AbilityVector>> {
        let mut any = false;
        let out = self
            .sources
            .iter()
            .map(|d| match sources.get(d) {
                Some(v) => {
                    any = true;
                    Ok(v.clone())
                }
                None => self
                    .source_means
                    .get(d)
                    .cloned()
                    .ok_or(Error::MissingSource(*d)),
            })
            .collect::<Result<Vec<_>>>()?;
        if !any {
            return Err(Error::Invalid("examinee has no source-domain ability".into()));
        }
        Ok(out)
    }

    /// Generates target abilities for a batch. Row `i` uses `theta_t[i]`, the
    /// `i`-th row of every source block, and starting noise `eps0[i]`.
    pub fn generate_batch<R: Rng + ?Sized>(
        &self,
        theta_t: &Array2<f64>,
        theta_s: &[Array2<f64>],
        eps0: &Array2<f64>,
        sampler: SamplerConfig,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        sampler.validate(&self.schedule)?;
        let share = self.csum.share_batch(theta_t, theta_s)?;
        match sampler {
            SamplerConfig::Fast { steps } => fast_sample(&self.denoiser, &share, eps0, &self.schedule, steps),
            SamplerConfig::Ancestral { noise } => {
                ancestral_sample(&self.denoiser, &share, eps0, &self.schedule, noise, rng)
            }
        }
    }

    /// Generates one examinee's target ability. `theta_t` is a known target
    /// ability or the stored substitute when none exists.
    pub fn generate_target_ability<R: Rng + ?Sized>(
        &self,
        theta_t: Option<&AbilityVector>,
        sources: &BTreeMap<DomainId, AbilityVector>,
        sampler: SamplerConfig,
        rng: &mut R,
    ) -> Result<AbilityVector> {
        let dim = self.dim();
        let t = theta_t.unwrap_or(&self.target_substitute);
        let row = |v: &AbilityVector| Array2::from_shape_vec((1, v.dim()), v.0.clone()).expect("row");
        let blocks: Vec<Array2<f64>> = self.source_row(sources)?.iter().map(row).collect();
        let eps0 = normal(rng, 1, dim);
        let out = self.generate_batch(&row(t), &blocks, &eps0, sampler, rng)?;
        Ok(AbilityVector(out.row(0).to_vec()))
    }
}
