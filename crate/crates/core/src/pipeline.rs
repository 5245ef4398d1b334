//! Stage functions shared by the command-line driver and the test suites.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catsim::SimContext;
use crate::cdm::{pretrain, AbilityVector, Cdm, CdmKind, MleConfig, PretrainConfig};
use crate::data::{DomainDataset, DomainId, ExamineeId, QuestionId, SplitPlan};
use crate::error::{Error, Result};
use crate::hcm::{train_dcsr, DcsrArtifact, DcsrConfig, SourceInput};

/// Settings of the ability fit behind the Oracle initializer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.05 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid("oracle steps must be >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Pretrained models of one CDM family for a target and its sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainedSet {
    pub kind: CdmKind,
    pub target: Cdm,
    pub sources: Vec<Cdm>,
    /// Abilities of cold examinees fitted on their target test logs with
    /// the target item bank frozen.
    pub oracle: BTreeMap<ExamineeId, AbilityVector>,
    /// Per-epoch training loss, target first, then sources in order.
    pub curves: BTreeMap<DomainId, Vec<f64>>,
}

impl PretrainedSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn find(datasets: &[DomainDataset], d: DomainId) -> Result<&DomainDataset> {
    datasets.iter().find(|x| x.domain == d).ok_or(Error::UnknownDomain(d))
}

/// Fits the target model on warm examinees only, each source model on its
/// whole domain, and the Oracle abilities of the cold examinees.
pub fn pretrain_stage(
    datasets: &[DomainDataset],
    plan: &SplitPlan,
    kind: CdmKind,
    cfg: &PretrainConfig,
    oracle: &OracleConfig,
) -> Result<PretrainedSet> {
    let target_ds = find(datasets, plan.target)?;
    let warm = target_ds.with_logs(plan.train_logs(target_ds));
    let target = pretrain(&warm, kind, cfg)?;
    let mut curves = BTreeMap::new();
    curves.insert(plan.target, target.losses);
    let mut sources = Vec::new();
    for &d in &plan.sources {
        let out = pretrain(find(datasets, d)?, kind, cfg)?;
        curves.insert(d, out.losses);
        sources.push(out.cdm);
    }
    let oracle = target.cdm.fit_abilities(&plan.test_logs(target_ds), oracle.steps, oracle.lr)?;
    Ok(PretrainedSet {
        kind,
        target: target.cdm,
        sources,
        oracle,
        curves,
    })
}

/// Trains the generator on the warm overlap between target and sources.
pub fn train_stage(
    set: &PretrainedSet,
    datasets: &[DomainDataset],
    plan: &SplitPlan,
    cfg: &DcsrConfig,
) -> Result<DcsrArtifact> {
    let target_logs = plan.train_logs(find(datasets, plan.target)?);
    let source_logs: Vec<_> = plan
        .sources
        .iter()
        .map(|&d| find(datasets, d).map(|ds| ds.logs.clone()))
        .collect::<Result<_>>()?;
    let sources: Vec<SourceInput<'_>> = set
        .sources
        .iter()
        .zip(&source_logs)
        .map(|(cdm, logs)| SourceInput { cdm, logs })
        .collect();
    train_dcsr(&set.target, &target_logs, &sources, cfg)
}

/// Cold examinees' target logs grouped per examinee.
pub fn cold_test_logs(
    datasets: &[DomainDataset],
    plan: &SplitPlan,
) -> Result<BTreeMap<ExamineeId, Vec<(QuestionId, bool)>>> {
    let mut out: BTreeMap<ExamineeId, Vec<(QuestionId, bool)>> = BTreeMap::new();
    for r in plan.test_logs(find(datasets, plan.target)?) {
        out.entry(r.examinee).or_default().push((r.question, r.correct));
    }
    Ok(out)
}

/// Simulation inputs backed by a pretrained set and an optional artifact.
pub fn sim_context<'a>(
    set: &'a PretrainedSet,
    artifact: Option<&'a DcsrArtifact>,
    mle: MleConfig,
    seed: u64,
) -> SimContext<'a> {
    SimContext {
        cdm: &set.target,
        oracle: &set.oracle,
        warm: &set.target.abilities,
        sources: set.sources.iter().map(|c| (c.domain, &c.abilities)).collect(),
        artifact,
        mle,
        seed,
    }
}
