//! One function per subcommand. Stages talk to each other only through
//! the files they write.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dcsr_core::catsim::{simulate as run_sessions, InitKind, PolicyKind, SessionOutcome};
use dcsr_core::cdm::CdmKind;
use dcsr_core::data::{self, DomainDataset, DomainId, SplitPlan};
use dcsr_core::eval::{dump_embeddings, run_grid, score_sessions, GridConfig};
use dcsr_core::hcm::DcsrArtifact;
use dcsr_core::pipeline::{cold_test_logs, pretrain_stage, sim_context, train_stage, PretrainedSet};

use crate::config::RunConfig;

/// Sidecar listing every file a stage wrote.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

struct Writer {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name)
    }

    /// Registers a file some other routine already wrote.
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn finish(self, stage: &str, cfg: &RunConfig) -> Result<()> {
        let m = Manifest {
            stage: stage.to_string(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            files: self.files,
        };
        let path = self.dir.join(format!("manifest_{stage}.json"));
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn logs_name(d: u32) -> String {
    format!("domain_{d}.csv")
}

fn qmatrix_name(d: u32) -> String {
    format!("qmatrix_{d}.csv")
}

fn pretrained_name(kind: CdmKind) -> String {
    format!("pretrained_{kind}.json")
}

fn artifact_name(kind: CdmKind) -> String {
    format!("dcsr_{kind}.json")
}

const SPLIT_FILE: &str = "split.json";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let (datasets, truth) = data::generate_synthetic(&cfg.synthetic())?;
    let mut w = Writer::new(&cfg.paths.data_dir)?;
    for ds in &datasets {
        let d = ds.domain.0;
        data::save_logs(ds, w.path(&logs_name(d)))?;
        w.record(&logs_name(d))?;
        data::save_qmatrix(&ds.q_matrix, w.path(&qmatrix_name(d)))?;
        w.record(&qmatrix_name(d))?;
    }
    w.write("truth.json", serde_json::to_string(&truth)?.as_bytes())?;
    log::info!(
        "wrote {} domains, {} responses to {}",
        datasets.len(),
        datasets.iter().map(|d| d.logs.len()).sum::<usize>(),
        cfg.paths.data_dir.display()
    );
    w.finish("synth", cfg)
}

/// Source domain ids: the configured list, or every other domain on disk.
fn source_ids(cfg: &RunConfig) -> Result<Vec<u32>> {
    if !cfg.domains.sources.is_empty() {
        return Ok(cfg.domains.sources.clone());
    }
    let dir = &cfg.paths.data_dir;
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("domain_").and_then(|s| s.strip_suffix(".csv")) {
            if let Ok(id) = id.parse::<u32>() {
                if id != cfg.domains.target {
                    out.insert(id);
                }
            }
        }
    }
    if out.is_empty() {
        bail!("no source domain files found in {}", dir.display());
    }
    Ok(out.into_iter().collect())
}

fn load_datasets(cfg: &RunConfig, sources: &[u32]) -> Result<Vec<DomainDataset>> {
    let dir = &cfg.paths.data_dir;
    std::iter::once(cfg.domains.target)
        .chain(sources.iter().copied())
        .map(|d| {
            let ds = data::load_domain(dir.join(logs_name(d)), dir.join(qmatrix_name(d)), DomainId(d))?;
            Ok(if cfg.split.min_responses > 0 {
                ds.filter_min_responses(cfg.split.min_responses)
            } else {
                ds
            })
        })
        .collect()
}

fn load_plan(cfg: &RunConfig) -> Result<SplitPlan> {
    let plan: SplitPlan = read_json(&cfg.paths.artifact_dir.join(SPLIT_FILE))?;
    if plan.target != cfg.target() {
        bail!(
            "split was made for target {} but the config names {}",
            plan.target,
            cfg.target()
        );
    }
    Ok(plan)
}

fn load_pretrained(cfg: &RunConfig, kind: CdmKind) -> Result<PretrainedSet> {
    let path = cfg.paths.artifact_dir.join(pretrained_name(kind));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {} (run `pretrain` first)", path.display()))?;
    PretrainedSet::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_artifact(path: &Path) -> Result<DcsrArtifact> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {} (run `train` first)", path.display()))?;
    DcsrArtifact::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let sources = source_ids(cfg)?;
    let datasets = load_datasets(cfg, &sources)?;
    let plan = data::split_cold_start(&datasets, cfg.target(), cfg.split.cold_ratio, cfg.split_seed())?;
    log::info!("split: {} warm, {} cold target examinees", plan.warm.len(), plan.cold.len());
    let mut w = Writer::new(&cfg.paths.artifact_dir)?;
    w.write(SPLIT_FILE, serde_json::to_string(&plan)?.as_bytes())?;
    for &kind in &cfg.cdm.kinds {
        let set = pretrain_stage(&datasets, &plan, kind, &cfg.pretrain_config(kind), &cfg.cdm.oracle)?;
        for (d, curve) in &set.curves {
            log::info!("{kind} domain {d}: final loss {:.4}", curve.last().copied().unwrap_or(f64::NAN));
        }
        w.write(&pretrained_name(kind), set.to_json()?.as_bytes())?;
    }
    w.finish("pretrain", cfg)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let plan = load_plan(cfg)?;
    let sources: Vec<u32> = plan.sources.iter().map(|d| d.0).collect();
    let datasets = load_datasets(cfg, &sources)?;
    let mut w = Writer::new(&cfg.paths.artifact_dir)?;
    for &kind in &cfg.cdm.kinds {
        let set = load_pretrained(cfg, kind)?;
        let art = train_stage(&set, &datasets, &plan, &cfg.dcsr_config(kind))?;
        if let (Some(first), Some(last)) = (art.history.first(), art.history.last()) {
            log::info!(
                "{kind}: total loss {:.4} -> {:.4}, consistency {:.4} -> {:.4}",
                first.total,
                last.total,
                first.consistency,
                last.consistency
            );
        }
        w.write(&artifact_name(kind), art.to_json()?.as_bytes())?;
    }
    w.finish("train", cfg)
}

/// Options of the `simulate` subcommand after validation.
#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub cdm: CdmKind,
    pub init: InitKind,
    pub policy: PolicyKind,
    pub steps: usize,
    pub artifact: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulationFile {
    pub config_hash: String,
    pub seed: u64,
    pub cdm: CdmKind,
    pub init: InitKind,
    pub policy: PolicyKind,
    pub steps: usize,
    /// AUC and ACC after each budget `0..=steps`.
    pub auc: Vec<f64>,
    pub acc: Vec<f64>,
    pub sessions: Vec<SessionOutcome>,
}

pub fn simulate(cfg: &RunConfig, args: &SimulateArgs) -> Result<()> {
    let plan = load_plan(cfg)?;
    let datasets = load_datasets(cfg, &[])?;
    let set = load_pretrained(cfg, args.cdm)?;
    let artifact = match (&args.artifact, args.init) {
        (Some(p), _) => Some(load_artifact(p)?),
        (None, InitKind::Dcsr) => Some(load_artifact(&cfg.paths.artifact_dir.join(artifact_name(args.cdm)))?),
        (None, _) => None,
    };
    if let Some(a) = &artifact {
        if a.target != plan.target || a.csum.target_head.kind() != args.cdm {
            bail!("artifact was trained for a different target domain or model");
        }
    }
    let logs = cold_test_logs(&datasets, &plan)?;
    let ctx = sim_context(&set, artifact.as_ref(), cfg.cdm.mle, cfg.session_seed());
    let sessions = run_sessions(&ctx, &logs, args.init, args.policy, args.steps, cfg.grid.eval_fraction)?;
    let mut auc = Vec::new();
    let mut acc = Vec::new();
    for k in 0..=args.steps {
        let (a, c, _) = score_sessions(&sessions, k, &ctx)?;
        auc.push(a);
        acc.push(c);
    }
    log::info!(
        "{} {} {}: AUC@{} {:.4}, ACC@{} {:.4}",
        args.cdm,
        args.policy,
        args.init,
        args.steps,
        auc[args.steps],
        args.steps,
        acc[args.steps]
    );
    let out = args.out.clone().unwrap_or_else(|| {
        cfg.paths
            .report_dir
            .join(format!("sessions_{}_{}_{}.json", args.cdm, args.policy, args.init))
    });
    let file = SimulationFile {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        cdm: args.cdm,
        init: args.init,
        policy: args.policy,
        steps: args.steps,
        auc,
        acc,
        sessions,
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&out, serde_json::to_string(&file)?).with_context(|| format!("writing {}", out.display()))
}

/// Reads a standalone grid file.
pub fn load_grid(path: &Path) -> Result<GridConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let grid: GridConfig = toml::from_str(&text).with_context(|| format!("in {}", path.display()))?;
    grid.validate().with_context(|| format!("in {}", path.display()))?;
    Ok(grid)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let plan = load_plan(cfg)?;
    let datasets = load_datasets(cfg, &[])?;
    let logs = cold_test_logs(&datasets, &plan)?;
    let kinds: BTreeSet<CdmKind> = cfg.grid.cells.iter().map(|c| c.cdm).collect();
    let need_artifact = cfg.grid.inits.contains(&InitKind::Dcsr);
    let mut sets = BTreeMap::new();
    let mut artifacts = BTreeMap::new();
    for &kind in &kinds {
        sets.insert(kind, load_pretrained(cfg, kind)?);
        if need_artifact {
            artifacts.insert(kind, load_artifact(&cfg.paths.artifact_dir.join(artifact_name(kind)))?);
        }
    }
    let seed = cfg.session_seed();
    let contexts: BTreeMap<_, _> = sets
        .iter()
        .map(|(k, s)| (*k, sim_context(s, artifacts.get(k), cfg.cdm.mle, seed)))
        .collect();
    let report = run_grid(&cfg.grid, &contexts, &logs, cfg.hash()?, cfg.seed)?;
    let table = report.to_table();
    print!("{table}");

    let mut w = Writer::new(&cfg.paths.report_dir)?;
    w.write("report.json", (report.to_json()? + "\n").as_bytes())?;
    w.write("report.txt", table.as_bytes())?;
    for (kind, ctx) in &contexts {
        let mut tables = BTreeMap::new();
        for &init in &cfg.grid.inits {
            let table = logs
                .keys()
                .map(|&e| Ok((e, ctx.initial_ability(init, e)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            tables.insert(init, table);
        }
        let name = format!("embeddings_{kind}.csv");
        dump_embeddings(&tables, w.path(&name))?;
        w.record(&name)?;
    }
    w.finish("eval", cfg)
}
