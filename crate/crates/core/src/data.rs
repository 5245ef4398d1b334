//! Multi-domain response logs: identifiers, CSV loading, cold-start splits and
//! a synthetic generator with a known shared-ability structure.
//!
//! Log files are headerless `examinee_id,question_id,correct` rows; Q-matrix
//! files are `question_id,concept_id` rows. Examinee ids are global, so the
//! same id in two domains is the same person. Question and concept ids are
//! dense and local to their domain.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(DomainId);
id_type!(ExamineeId);
id_type!(QuestionId);
id_type!(ConceptId);

/// One logged answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResponseTriple {
    pub examinee: ExamineeId,
    pub question: QuestionId,
    pub correct: bool,
}

impl ResponseTriple {
    pub fn label(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }
}

/// Question to concept relation of one domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QMatrix {
    concepts: Vec<Vec<ConceptId>>,
    n_concepts: usize,
}

impl QMatrix {
    /// Every question `0..concepts.len()` must have at least one concept.
    pub fn new(concepts: Vec<Vec<ConceptId>>) -> Result<Self> {
        let mut n_concepts = 0;
        for (q, cs) in concepts.iter().enumerate() {
            if cs.is_empty() {
                return Err(Error::Invalid(format!("question {q} has no concept")));
            }
            for c in cs {
                n_concepts = n_concepts.max(c.index() + 1);
            }
        }
        let concepts = concepts
            .into_iter()
            .map(|mut cs| {
                cs.sort();
                cs.dedup();
                cs
            })
            .collect();
        Ok(Self {
            concepts,
            n_concepts,
        })
    }

    pub fn n_questions(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn concepts(&self, q: QuestionId) -> Option<&[ConceptId]> {
        self.concepts.get(q.index()).map(Vec::as_slice)
    }

    /// Dense 0/1 mask, `n_questions x n_concepts`.
    pub fn mask(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_questions(), self.n_concepts));
        for (q, cs) in self.concepts.iter().enumerate() {
            for c in cs {
                m[[q, c.index()]] = 1.0;
            }
        }
        m
    }
}

/// All logs and item metadata of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub q_matrix: QMatrix,
    pub logs: Vec<ResponseTriple>,
}

impl DomainDataset {
    /// Validates ids and uniqueness of `(examinee, question)` pairs.
    pub fn new(domain: DomainId, q_matrix: QMatrix, logs: Vec<ResponseTriple>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &logs {
            if r.question.index() >= q_matrix.n_questions() {
                return Err(Error::UnknownQuestion {
                    domain,
                    question: r.question,
                });
            }
            if !seen.insert((r.examinee, r.question)) {
                return Err(Error::Invalid(format!(
                    "duplicate response of examinee {} to question {}",
                    r.examinee, r.question
                )));
            }
        }
        Ok(Self {
            domain,
            q_matrix,
            logs,
        })
    }

    pub fn n_questions(&self) -> usize {
        self.q_matrix.n_questions()
    }

    pub fn n_concepts(&self) -> usize {
        self.q_matrix.n_concepts()
    }

    pub fn examinees(&self) -> BTreeSet<ExamineeId> {
        self.logs.iter().map(|r| r.examinee).collect()
    }

    /// Logs grouped per examinee, in file order within each group.
    pub fn by_examinee(&self) -> BTreeMap<ExamineeId, Vec<ResponseTriple>> {
        let mut out: BTreeMap<ExamineeId, Vec<ResponseTriple>> = BTreeMap::new();
        for r in &self.logs {
            out.entry(r.examinee).or_default().push(*r);
        }
        out
    }

    /// Same domain restricted to the given logs.
    pub fn with_logs(&self, logs: Vec<ResponseTriple>) -> Self {
        Self {
            domain: self.domain,
            q_matrix: self.q_matrix.clone(),
            logs,
        }
    }

    /// Drops examinees with fewer than `min` responses in this domain.
    pub fn filter_min_responses(&self, min: usize) -> Self {
        let counts = self.by_examinee();
        let logs = self
            .logs
            .iter()
            .filter(|r| counts[&r.examinee].len() >= min)
            .copied()
            .collect();
        self.with_logs(logs)
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    record: &csv::StringRecord,
    col: usize,
    name: &str,
) -> Result<T> {
    let raw = record.get(col).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("{name} {raw:?} is not a non-negative integer"),
    })
}

fn records(path: &Path, width: usize) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for (i, rec) in csv_reader(path)?.into_records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(i as u64 + 1, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        out.push((line, rec));
    }
    Ok(out)
}

/// Reads a `question_id,concept_id` file.
pub fn load_qmatrix(path: impl AsRef<Path>) -> Result<QMatrix> {
    let path = path.as_ref();
    let mut concepts: Vec<Vec<ConceptId>> = Vec::new();
    for (line, rec) in records(path, 2)? {
        let q: u32 = parse_field(path, line, &rec, 0, "question_id")?;
        let c: u32 = parse_field(path, line, &rec, 1, "concept_id")?;
        if concepts.len() <= q as usize {
            concepts.resize(q as usize + 1, Vec::new());
        }
        concepts[q as usize].push(ConceptId(c));
    }
    QMatrix::new(concepts)
}

/// Reads an `examinee_id,question_id,correct` file and validates it against
/// the domain's Q-matrix.
pub fn load_logs(path: impl AsRef<Path>, domain: DomainId, q_matrix: QMatrix) -> Result<DomainDataset> {
    let path = path.as_ref();
    let mut logs = Vec::new();
    let mut seen = BTreeSet::new();
    let invalid = |line, message| Error::InvalidRecord {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (line, rec) in records(path, 3)? {
        let examinee = ExamineeId(parse_field(path, line, &rec, 0, "examinee_id")?);
        let question = QuestionId(parse_field(path, line, &rec, 1, "question_id")?);
        let correct: u32 = parse_field(path, line, &rec, 2, "correct")?;
        if correct > 1 {
            return Err(invalid(line, format!("correct must be 0 or 1, got {correct}")));
        }
        if question.index() >= q_matrix.n_questions() {
            return Err(invalid(
                line,
                format!("question {question} is not in the Q-matrix"),
            ));
        }
        if !seen.insert((examinee, question)) {
            return Err(invalid(
                line,
                format!("duplicate response of examinee {examinee} to question {question}"),
            ));
        }
        logs.push(ResponseTriple {
            examinee,
            question,
            correct: correct == 1,
        });
    }
    Ok(DomainDataset {
        domain,
        q_matrix,
        logs,
    })
}

/// Loads a domain from its log and Q-matrix files.
pub fn load_domain(
    log_path: impl AsRef<Path>,
    qmatrix_path: impl AsRef<Path>,
    domain: DomainId,
) -> Result<DomainDataset> {
    let q = load_qmatrix(qmatrix_path)?;
    load_logs(log_path, domain, q)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn save_logs(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut body = String::with_capacity(ds.logs.len() * 12);
    for r in &ds.logs {
        body.push_str(&format!(
            "{},{},{}\n",
            r.examinee,
            r.question,
            u8::from(r.correct)
        ));
    }
    write_file(path.as_ref(), &body)
}

pub fn save_qmatrix(q: &QMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut body = String::new();
    for (qid, cs) in q.concepts.iter().enumerate() {
        for c in cs {
            body.push_str(&format!("{qid},{c}\n"));
        }
    }
    write_file(path.as_ref(), &body)
}

/// Warm/cold partition of the target domain's examinees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target: DomainId,
    pub sources: Vec<DomainId>,
    pub warm: BTreeSet<ExamineeId>,
    pub cold: BTreeSet<ExamineeId>,
    /// Target examinees without any source-domain log; used nowhere.
    pub excluded: BTreeSet<ExamineeId>,
}

impl SplitPlan {
    pub fn is_cold(&self, e: ExamineeId) -> bool {
        self.cold.contains(&e)
    }

    /// Training partition of one domain: warm target logs, or every source log.
    pub fn train_logs(&self, ds: &DomainDataset) -> Vec<ResponseTriple> {
        if ds.domain == self.target {
            ds.logs
                .iter()
                .filter(|r| self.warm.contains(&r.examinee))
                .copied()
                .collect()
        } else {
            ds.logs.clone()
        }
    }

    /// Test partition: cold examinees' target logs.
    pub fn test_logs(&self, target: &DomainDataset) -> Vec<ResponseTriple> {
        target
            .logs
            .iter()
            .filter(|r| self.cold.contains(&r.examinee))
            .copied()
            .collect()
    }
}

/// Splits the target domain's examinees into warm and cold sets.
///
/// Only examinees with at least one target log and one source log are
/// eligible; the rest are reported in `excluded`. The cold share is
/// `round(ratio * eligible)`, kept within `1..eligible`.
pub fn split_cold_start(
    datasets: &[DomainDataset],
    target: DomainId,
    ratio: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} not in (0,1)")));
    }
    let target_ds = datasets
        .iter()
        .find(|d| d.domain == target)
        .ok_or(Error::UnknownDomain(target))?;
    let mut sources: Vec<DomainId> = datasets
        .iter()
        .map(|d| d.domain)
        .filter(|&d| d != target)
        .collect();
    sources.sort();
    let with_source: BTreeSet<ExamineeId> = datasets
        .iter()
        .filter(|d| d.domain != target)
        .flat_map(|d| d.logs.iter().map(|r| r.examinee))
        .collect();
    let (eligible, excluded): (Vec<ExamineeId>, Vec<ExamineeId>) = target_ds
        .examinees()
        .into_iter()
        .partition(|e| with_source.contains(e));
    if !excluded.is_empty() {
        log::warn!(
            "{} target examinees have no source-domain logs and are excluded",
            excluded.len()
        );
    }
    if eligible.len() < 2 {
        return Err(Error::TooFewExaminees(eligible.len()));
    }
    let n = eligible.len();
    let n_cold = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order = eligible;
    order.shuffle(&mut seed::rng(seed, Stream::Split, 0));
    let cold: BTreeSet<_> = order[..n_cold].iter().copied().collect();
    let warm: BTreeSet<_> = order[n_cold..].iter().copied().collect();
    Ok(SplitPlan {
        target,
        sources,
        warm,
        cold,
        excluded: excluded.into_iter().collect(),
    })
}

/// Parameters of the linear shared-factor generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_examinees: usize,
    pub n_domains: usize,
    pub items_per_domain: usize,
    /// Dimension `k` of the shared factor and of each latent ability.
    pub shared_dim: usize,
    /// Standard deviation of the domain-specific ability noise.
    pub specific_noise: f64,
    /// Concepts per domain in the generated Q-matrices.
    #[serde(default = "default_concepts")]
    pub n_concepts: usize,
    /// Fraction of a domain's items each examinee answers.
    #[serde(default = "default_answer_rate")]
    pub answer_rate: f64,
    pub seed: u64,
}

fn default_concepts() -> usize {
    4
}

fn default_answer_rate() -> f64 {
    1.0
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_examinees: 1000,
            n_domains: 3,
            items_per_domain: 200,
            shared_dim: 4,
            specific_noise: 0.3,
            n_concepts: default_concepts(),
            answer_rate: default_answer_rate(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_examinees", self.n_examinees),
            ("n_domains", self.n_domains),
            ("items_per_domain", self.items_per_domain),
            ("shared_dim", self.shared_dim),
            ("n_concepts", self.n_concepts),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.specific_noise >= 0.0 && self.specific_noise.is_finite()) {
            return Err(Error::Invalid("specific_noise must be >= 0".into()));
        }
        if !(self.answer_rate > 0.0 && self.answer_rate <= 1.0) {
            return Err(Error::Invalid("answer_rate must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// Item parameters of the generating 2PL model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueItem {
    pub discrimination: f64,
    pub difficulty: f64,
}

/// Everything the generator drew, for recovery checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Shared factor `z_i`, one row per examinee.
    pub shared: Vec<Vec<f64>>,
    /// `abilities[d][i]` is the latent vector of examinee `i` in domain `d`.
    pub abilities: Vec<Vec<Vec<f64>>>,
    /// Readout `w_d` of each domain.
    pub readouts: Vec<Vec<f64>>,
    /// Mixing matrix `A_d` of each domain, row-major `k x k`.
    pub mixing: Vec<Vec<Vec<f64>>>,
    pub items: Vec<Vec<TrueItem>>,
}

impl GroundTruth {
    /// Scalar ability `w_d . theta*` entering the response model.
    pub fn scalar_ability(&self, domain: DomainId, examinee: ExamineeId) -> f64 {
        let d = domain.index();
        dot(&self.readouts[d], &self.abilities[d][examinee.index()])
    }

    pub fn response_prob(&self, domain: DomainId, examinee: ExamineeId, q: QuestionId) -> f64 {
        let item = self.items[domain.index()][q.index()];
        sigmoid(item.discrimination * (self.scalar_ability(domain, examinee) - item.difficulty))
    }
}

/// Perturbation scale of each domain's mixing matrix around the identity.
const MIXING_SPREAD: f64 = 0.15;
/// Perturbation scale of each domain's readout around the mean direction.
const READOUT_SPREAD: f64 = 0.05;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws `n_domains` datasets whose abilities share a common factor.
///
/// Per domain, `theta*_i = A_d z_i + u_i` with `A_d` a perturbed identity and
/// `u_i ~ N(0, sigma^2 I)`. The readout `w_d` is scaled so the shared part of
/// `w_d . theta*` has unit variance. Responses follow a 2PL model on that
/// scalar with `a ~ U(0.5, 2)` and `b ~ N(0, 1)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<DomainDataset>, GroundTruth)> {
    cfg.validate()?;
    let k = cfg.shared_dim;
    let mut rng = seed::rng(cfg.seed, Stream::Synth, 0);
    let normal = StandardNormal;

    let shared: Vec<Vec<f64>> = (0..cfg.n_examinees)
        .map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect())
        .collect();

    let noise = Normal::new(0.0, cfg.specific_noise).map_err(|e| Error::Invalid(e.to_string()))?;
    let discrimination = Uniform::new(0.5, 2.0).expect("valid range");
    let mut datasets = Vec::with_capacity(cfg.n_domains);
    let mut truth = GroundTruth {
        shared: shared.clone(),
        abilities: Vec::new(),
        readouts: Vec::new(),
        mixing: Vec::new(),
        items: Vec::new(),
    };

    for d in 0..cfg.n_domains {
        let domain = DomainId(d as u32);
        let mixing: Vec<Vec<f64>> = (0..k)
            .map(|r| {
                (0..k)
                    .map(|c| {
                        let g: f64 = normal.sample(&mut rng);
                        f64::from(u8::from(r == c)) + MIXING_SPREAD * g / (k as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        let mut readout: Vec<f64> = (0..k)
            .map(|_| {
                let g: f64 = normal.sample(&mut rng);
                1.0 / (k as f64).sqrt() + READOUT_SPREAD * g
            })
            .collect();
        // scale so that Var(w . A z) = |A^T w|^2 = 1
        let at_w: Vec<f64> = (0..k)
            .map(|c| (0..k).map(|r| mixing[r][c] * readout[r]).sum())
            .collect();
        let norm = dot(&at_w, &at_w).sqrt();
        readout.iter_mut().for_each(|w| *w /= norm);

        let abilities: Vec<Vec<f64>> = shared
            .iter()
            .map(|z| {
                (0..k)
                    .map(|r| {
                        let mixed: f64 = (0..k).map(|c| mixing[r][c] * z[c]).sum();
                        mixed + noise.sample(&mut rng)
                    })
                    .collect()
            })
            .collect();

        let items: Vec<TrueItem> = (0..cfg.items_per_domain)
            .map(|_| TrueItem {
                discrimination: discrimination.sample(&mut rng),
                difficulty: normal.sample(&mut rng),
            })
            .collect();

        let q_concepts: Vec<Vec<ConceptId>> = (0..cfg.items_per_domain)
            .map(|j| {
                let mut cs = vec![ConceptId((j % cfg.n_concepts) as u32)];
                if cfg.n_concepts > 1 && rng.random_bool(0.3) {
                    cs.push(ConceptId(rng.random_range(0..cfg.n_concepts) as u32));
                }
                cs
            })
            .collect();
        let q_matrix = QMatrix::new(q_concepts)?;

        let mut logs = Vec::new();
        for (i, theta) in abilities.iter().enumerate() {
            let ability = dot(&readout, theta);
            for (j, item) in items.iter().enumerate() {
                if cfg.answer_rate < 1.0 && !rng.random_bool(cfg.answer_rate) {
                    continue;
                }
                let p = sigmoid(item.discrimination * (ability - item.difficulty));
                logs.push(ResponseTriple {
                    examinee: ExamineeId(i as u32),
                    question: QuestionId(j as u32),
                    correct: rng.random_bool(p),
                });
            }
        }

        datasets.push(DomainDataset::new(domain, q_matrix, logs)?);
        truth.abilities.push(abilities);
        truth.readouts.push(readout);
        truth.mixing.push(mixing);
        truth.items.push(items);
    }
    Ok((datasets, truth))
}

/// Pearson correlation; `NaN` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
