//! Response-prediction metrics, the experiment grid and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catsim::{simulate, InitKind, PolicyKind, SessionOutcome, SimContext};
use crate::cdm::{AbilityVector, CdmKind};
use crate::data::{ExamineeId, QuestionId};
use crate::error::{Error, Result};

/// Mann-Whitney AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tied block i..=j shares their mean.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of rows where `score >= threshold` agrees with the label.
pub fn acc(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("ACC"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// One (model, policy) pairing of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub cdm: CdmKind,
    pub policy: PolicyKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub cells: Vec<GridCell>,
    pub inits: Vec<InitKind>,
    pub steps: Vec<usize>,
    pub eval_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cells: vec![
                GridCell {
                    cdm: CdmKind::Irt,
                    policy: PolicyKind::Fisher,
                },
                GridCell {
                    cdm: CdmKind::Ncd,
                    policy: PolicyKind::Emc,
                },
            ],
            inits: vec![InitKind::Random, InitKind::Dcsr, InitKind::Oracle],
            steps: vec![1, 5],
            eval_fraction: 0.2,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.inits.is_empty() || self.steps.is_empty() {
            return Err(Error::Invalid("grid needs at least one cell, initializer and step budget".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Invalid("eval_fraction must be in (0, 1)".into()));
        }
        for c in &self.cells {
            if c.policy == PolicyKind::Fisher && c.cdm != CdmKind::Irt {
                return Err(Error::FisherNeedsIrt);
            }
        }
        Ok(())
    }

    pub fn max_steps(&self) -> usize {
        self.steps.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cdm: CdmKind,
    pub policy: PolicyKind,
    pub init: InitKind,
    pub steps: usize,
    pub auc: f64,
    pub acc: f64,
    pub examinees: usize,
    pub responses: usize,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn get(&self, cdm: CdmKind, policy: PolicyKind, init: InitKind, steps: usize) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.cdm == cdm && r.policy == policy && r.init == init && r.steps == steps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width text table, one row per cell and budget.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {} seed {}", self.config_hash, self.seed);
        let _ = writeln!(
            out,
            "{:<5} {:<7} {:<7} {:>5} {:>8} {:>8} {:>6} {:>8}",
            "cdm", "policy", "init", "steps", "auc", "acc", "n", "resp"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<5} {:<7} {:<7} {:>5} {:>8.4} {:>8.4} {:>6} {:>8}",
                r.cdm.to_string(),
                r.policy.name(),
                r.init.name(),
                r.steps,
                r.auc,
                r.acc,
                r.examinees,
                r.responses
            );
        }
        out
    }
}

/// SHA-256 of a value's JSON form. Object keys come out sorted, so equal
/// values always hash alike.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
}

/// Scores every held-out response with the ability after `steps` selections.
pub fn score_sessions(outcomes: &[SessionOutcome], steps: usize, ctx: &SimContext<'_>) -> Result<(f64, f64, usize)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for o in outcomes {
        let theta = o.record.ability_at(steps);
        for &(q, r) in &o.eval {
            scores.push(ctx.cdm.predict_prob(theta.as_slice(), q)?);
            labels.push(r);
        }
    }
    Ok((auc(&scores, &labels)?, acc(&scores, &labels, 0.5)?, scores.len()))
}

/// Runs every (cell, initializer) once at the largest budget and reads the
/// shorter budgets off the same sessions.
pub fn run_grid(
    grid: &GridConfig,
    contexts: &BTreeMap<CdmKind, SimContext<'_>>,
    test_logs: &BTreeMap<ExamineeId, Vec<(QuestionId, bool)>>,
    config_hash: String,
    seed: u64,
) -> Result<MetricReport> {
    grid.validate()?;
    for cell in &grid.cells {
        let ctx = contexts
            .get(&cell.cdm)
            .ok_or_else(|| Error::MissingArtifact(format!("{} model", cell.cdm)))?;
        if grid.inits.contains(&InitKind::Dcsr) && ctx.artifact.is_none() {
            return Err(Error::MissingArtifact(cell.cdm.to_string()));
        }
    }
    let mut rows = Vec::new();
    for cell in &grid.cells {
        let ctx = &contexts[&cell.cdm];
        for &init in &grid.inits {
            let outcomes = simulate(ctx, test_logs, init, cell.policy, grid.max_steps(), grid.eval_fraction)?;
            for &steps in &grid.steps {
                let (a, c, n) = score_sessions(&outcomes, steps, ctx)?;
                rows.push(MetricRow {
                    cdm: cell.cdm,
                    policy: cell.policy,
                    init,
                    steps,
                    auc: a,
                    acc: c,
                    examinees: outcomes.len(),
                    responses: n,
                });
            }
        }
    }
    Ok(MetricReport {
        version: REPORT_VERSION,
        config_hash,
        seed,
        rows,
    })
}

/// Writes `id,initializer,v0,v1,...` rows, examinees in id order within each initializer.
pub fn dump_embeddings(
    tables: &BTreeMap<InitKind, BTreeMap<ExamineeId, AbilityVector>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    for (init, table) in tables {
        for (e, v) in table {
            let mut rec = vec![e.to_string(), init.name().to_string()];
            rec.extend(v.0.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a file written by [`dump_embeddings`].
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<BTreeMap<InitKind, BTreeMap<ExamineeId, AbilityVector>>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    let mut out: BTreeMap<InitKind, BTreeMap<ExamineeId, AbilityVector>> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 1;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() < 3 {
            return Err(bad("expected id, initializer and at least one value".into()));
        }
        let id: u32 = rec[0].parse().map_err(|_| bad(format!("bad id {:?}", &rec[0])))?;
        let init: InitKind = rec[1].parse().map_err(|_| bad(format!("bad initializer {:?}", &rec[1])))?;
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad value {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.entry(init).or_default().insert(ExamineeId(id), AbilityVector(values));
    }
    Ok(out)
}

/// Mean of each consecutive window of `width` values.
pub fn moving_average(values: &[f64], width: usize) -> Vec<f64> {
    values
        .windows(width.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}
