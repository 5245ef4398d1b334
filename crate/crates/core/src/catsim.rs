//! Offline adaptive-testing simulator over logged responses.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdm::{AbilityVector, Cdm, ItemParams, MleConfig};
use crate::data::{DomainId, ExamineeId, QuestionId};
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::hcm::DcsrArtifact;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Dcsr,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Fisher,
    Emc,
}

macro_rules! name_enum {
    ($t:ty { $($v:ident => $s:literal),* }) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
        }

        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }

        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)*
                    other => Err(Error::Invalid(format!("unknown {} {other:?}", stringify!($t)))),
                }
            }
        }
    };
}

name_enum!(InitKind { Random => "random", Dcsr => "dcsr", Oracle => "oracle" });
name_enum!(PolicyKind { Random => "random", Fisher => "fisher", Emc => "emc" });

/// Elementwise mean of a non-empty ability table.
pub fn cold_substitute(table: &BTreeMap<ExamineeId, AbilityVector>) -> Result<AbilityVector> {
    let mut it = table.values();
    let first = it.next().ok_or(Error::Empty("cold_substitute"))?;
    let mut acc = first.0.clone();
    for v in it {
        if v.dim() != acc.len() {
            return Err(Error::DimensionMismatch {
                expected: acc.len(),
                got: v.dim(),
            });
        }
        acc.iter_mut().zip(&v.0).for_each(|(a, b)| *a += b);
    }
    let n = table.len() as f64;
    Ok(AbilityVector(acc.into_iter().map(|a| a / n).collect()))
}

/// `logit(u)` per coordinate with `u ~ U(0, 1)`.
pub fn random_init<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> AbilityVector {
    AbilityVector(
        (0..dim)
            .map(|_| {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                (u / (1.0 - u)).ln()
            })
            .collect(),
    )
}

fn init_rng(seed: u64, kind: InitKind, e: ExamineeId) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed, Stream::Init, (u64::from(e.0) << 2) | kind as u64)
}

/// Generated initial ability for a cold examinee, from the warm-table mean
/// and whatever source abilities the examinee has.
pub fn dcsr_init(
    artifact: &DcsrArtifact,
    examinee: ExamineeId,
    source_tables: &BTreeMap<DomainId, &BTreeMap<ExamineeId, AbilityVector>>,
    warm_table: &BTreeMap<ExamineeId, AbilityVector>,
    seed: u64,
) -> Result<AbilityVector> {
    let sources: BTreeMap<DomainId, AbilityVector> = source_tables
        .iter()
        .filter_map(|(d, t)| t.get(&examinee).map(|v| (*d, v.clone())))
        .collect();
    if sources.is_empty() {
        return Err(Error::NoSourceAbility(examinee));
    }
    let substitute = cold_substitute(warm_table)?;
    let mut rng = init_rng(seed, InitKind::Dcsr, examinee);
    let sampler = match artifact.config.sampler {
        s @ SamplerConfig::Fast { .. } => s,
        SamplerConfig::Ancestral { .. } => SamplerConfig::Fast { steps: 30 },
    };
    artifact.generate_target_ability(Some(&substitute), &sources, sampler, &mut rng)
}

fn irt(cdm: &Cdm) -> Result<&crate::cdm::IrtParams> {
    match &cdm.params {
        ItemParams::Irt(p) => Ok(p),
        ItemParams::Ncd(_) => Err(Error::FisherNeedsIrt),
    }
}

/// Fisher information `a^2 p (1 - p)` of `q` at `theta`.
pub fn fisher_information(cdm: &Cdm, theta: &AbilityVector, q: QuestionId) -> Result<f64> {
    let a = irt(cdm)?.discrimination(q.index());
    let p = cdm.predict_prob(theta.as_slice(), q)?;
    Ok(a * a * p * (1.0 - p))
}

/// Index of the largest score; ties go to the smallest question id.
fn argmax(pool: &[QuestionId], scores: &[f64]) -> QuestionId {
    let mut best = 0;
    for i in 1..pool.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && pool[i] < pool[best]) {
            best = i;
        }
    }
    pool[best]
}

pub fn fisher_select(pool: &[QuestionId], theta: &AbilityVector, cdm: &Cdm) -> Result<QuestionId> {
    if pool.is_empty() {
        return Err(Error::Empty("fisher_select"));
    }
    let scores = pool
        .iter()
        .map(|&q| fisher_information(cdm, theta, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(pool, &scores))
}

/// Expected distance the ability moves after answering `q`.
pub fn expected_model_change(cdm: &Cdm, theta: &AbilityVector, q: QuestionId, mle: &MleConfig) -> Result<f64> {
    let p = cdm.predict_prob(theta.as_slice(), q)?;
    let right = cdm.update_ability_mle(theta, &[(q, true)], mle)?;
    let wrong = cdm.update_ability_mle(theta, &[(q, false)], mle)?;
    Ok(p * right.distance(theta) + (1.0 - p) * wrong.distance(theta))
}

pub fn emc_select(pool: &[QuestionId], theta: &AbilityVector, cdm: &Cdm, mle: &MleConfig) -> Result<QuestionId> {
    if pool.is_empty() {
        return Err(Error::Empty("emc_select"));
    }
    let scores = pool
        .iter()
        .map(|&q| expected_model_change(cdm, theta, q, mle))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(pool, &scores))
}

/// One examinee's session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub examinee: ExamineeId,
    pub init: InitKind,
    pub policy: PolicyKind,
    pub selections: Vec<(QuestionId, bool)>,
    /// `theta^0 ..= theta^n`.
    pub trajectory: Vec<AbilityVector>,
    /// Set when the pool ran out before the step budget.
    pub truncated: bool,
}

impl SessionRecord {
    /// Ability after `steps` selections, or the last one if the session was shorter.
    pub fn ability_at(&self, steps: usize) -> &AbilityVector {
        &self.trajectory[steps.min(self.trajectory.len() - 1)]
    }
}

/// Runs up to `steps` rounds of select, observe, re-estimate.
#[allow(clippy::too_many_arguments)]
pub fn run_session(
    examinee: ExamineeId,
    init: InitKind,
    theta0: AbilityVector,
    policy: PolicyKind,
    cdm: &Cdm,
    pool: &[(QuestionId, bool)],
    steps: usize,
    mle: &MleConfig,
    seed: u64,
) -> Result<SessionRecord> {
    if theta0.dim() != cdm.ability_dim() {
        return Err(Error::DimensionMismatch {
            expected: cdm.ability_dim(),
            got: theta0.dim(),
        });
    }
    if policy == PolicyKind::Fisher {
        irt(cdm)?;
    }
    let answers: BTreeMap<QuestionId, bool> = pool.iter().copied().collect();
    let mut remaining: Vec<QuestionId> = answers.keys().copied().collect();
    let mut rng = seed::rng(seed, Stream::Policy, u64::from(examinee.0));
    let mut theta = theta0;
    let mut record = SessionRecord {
        examinee,
        init,
        policy,
        selections: Vec::with_capacity(steps),
        trajectory: vec![theta.clone()],
        truncated: false,
    };
    for _ in 0..steps {
        if remaining.is_empty() {
            record.truncated = true;
            break;
        }
        let q = match policy {
            PolicyKind::Random => *remaining.choose(&mut rng).expect("non-empty"),
            PolicyKind::Fisher => fisher_select(&remaining, &theta, cdm)?,
            PolicyKind::Emc => emc_select(&remaining, &theta, cdm, mle)?,
        };
        remaining.retain(|&x| x != q);
        record.selections.push((q, answers[&q]));
        theta = cdm.update_ability_mle(&theta, &record.selections, mle)?;
        if !theta.is_finite() {
            return Err(Error::NonFinite("ability update"));
        }
        record.trajectory.push(theta.clone());
    }
    Ok(record)
}

/// Seeded split of one examinee's logs into a candidate pool and a held-out
/// evaluation set holding `eval_fraction` of them (at least one when there
/// are two or more logs).
pub fn split_pool(
    logs: &[(QuestionId, bool)],
    examinee: ExamineeId,
    eval_fraction: f64,
    seed: u64,
) -> (Vec<(QuestionId, bool)>, Vec<(QuestionId, bool)>) {
    let mut shuffled = logs.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut seed::rng(seed, Stream::PoolSplit, u64::from(examinee.0)));
    let n = shuffled.len();
    let n_eval = if n < 2 {
        0
    } else {
        ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1)
    };
    let eval = shuffled.split_off(n - n_eval);
    (shuffled, eval)
}

/// Inputs shared by every session of one target model.
pub struct SimContext<'a> {
    pub cdm: &'a Cdm,
    /// Abilities fitted on the cold examinees' own target logs.
    pub oracle: &'a BTreeMap<ExamineeId, AbilityVector>,
    /// Pretrained target abilities of warm examinees.
    pub warm: &'a BTreeMap<ExamineeId, AbilityVector>,
    pub sources: BTreeMap<DomainId, &'a BTreeMap<ExamineeId, AbilityVector>>,
    pub artifact: Option<&'a DcsrArtifact>,
    pub mle: MleConfig,
    pub seed: u64,
}

impl SimContext<'_> {
    pub fn initial_ability(&self, kind: InitKind, e: ExamineeId) -> Result<AbilityVector> {
        match kind {
            InitKind::Random => Ok(random_init(&mut init_rng(self.seed, kind, e), self.cdm.ability_dim())),
            InitKind::Oracle => self
                .oracle
                .get(&e)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("no oracle ability for examinee {e}"))),
            InitKind::Dcsr => {
                let art = self.artifact.ok_or_else(|| Error::MissingArtifact(self.cdm.kind().to_string()))?;
                dcsr_init(art, e, &self.sources, self.warm, self.seed)
            }
        }
    }
}

/// A finished session together with its held-out responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub record: SessionRecord,
    pub eval: Vec<(QuestionId, bool)>,
}

/// Runs one session per examinee in parallel; output is in examinee order.
pub fn simulate(
    ctx: &SimContext<'_>,
    test_logs: &BTreeMap<ExamineeId, Vec<(QuestionId, bool)>>,
    init: InitKind,
    policy: PolicyKind,
    steps: usize,
    eval_fraction: f64,
) -> Result<Vec<SessionOutcome>> {
    if init == InitKind::Dcsr && ctx.artifact.is_none() {
        return Err(Error::MissingArtifact(ctx.cdm.kind().to_string()));
    }
    if policy == PolicyKind::Fisher {
        irt(ctx.cdm)?;
    }
    let examinees: Vec<(&ExamineeId, &Vec<(QuestionId, bool)>)> = test_logs.iter().collect();
    examinees
        .par_iter()
        .map(|(&e, logs)| {
            let (pool, eval) = split_pool(logs, e, eval_fraction, ctx.seed);
            let theta0 = ctx.initial_ability(init, e)?;
            let record = run_session(e, init, theta0, policy, ctx.cdm, &pool, steps, &ctx.mle, ctx.seed)?;
            Ok(SessionOutcome { record, eval })
        })
        .collect()
}
