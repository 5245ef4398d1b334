use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dcsr_core::cdm::{CdmKind, MleConfig, PretrainConfig};
use dcsr_core::data::{DomainId, SyntheticConfig};
use dcsr_core::eval::{config_hash, GridConfig};
use dcsr_core::hcm::DcsrConfig;
use dcsr_core::pipeline::OracleConfig;
use dcsr_core::seed::{self, Stream};

pub const DATA_DIR_ENV: &str = "DCSR_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub artifact_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            artifact_dir: "artifacts".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domains {
    pub target: u32,
    /// Defaults to every other domain found in the data directory.
    #[serde(default)]
    pub sources: Vec<u32>,
}

/// Generator settings; its seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_examinees: usize,
    pub n_domains: usize,
    pub items_per_domain: usize,
    pub shared_dim: usize,
    pub specific_noise: f64,
    pub n_concepts: usize,
    pub answer_rate: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            n_examinees: d.n_examinees,
            n_domains: d.n_domains,
            items_per_domain: d.items_per_domain,
            shared_dim: d.shared_dim,
            specific_noise: d.specific_noise,
            n_concepts: d.n_concepts,
            answer_rate: d.answer_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub cold_ratio: f64,
    /// Examinees with fewer responses in a domain are dropped from it.
    pub min_responses: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            cold_ratio: 0.2,
            min_responses: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdmSection {
    pub kinds: Vec<CdmKind>,
    pub pretrain: PretrainConfig,
    pub oracle: OracleConfig,
    pub mle: MleConfig,
}

impl Default for CdmSection {
    fn default() -> Self {
        Self {
            kinds: vec![CdmKind::Irt, CdmKind::Ncd],
            pretrain: PretrainConfig::default(),
            oracle: OracleConfig::default(),
            mle: MleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub domains: Domains,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub cdm: CdmSection,
    #[serde(default)]
    pub dcsr: DcsrConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

impl RunConfig {
    /// Parses and validates `path`. Relative paths inside are resolved
    /// against the file's directory; `DCSR_DATA_DIR` overrides the data dir.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            cfg.paths.data_dir = PathBuf::from(dir);
        }
        for p in [
            &mut cfg.paths.data_dir,
            &mut cfg.paths.artifact_dir,
            &mut cfg.paths.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text)?;
        // Stage seeds are derived from the run seed; a second source would be ambiguous.
        let nested = |section: &str, sub: Option<&str>| {
            let mut t = raw.get(section).and_then(|v| v.as_table());
            if let Some(s) = sub {
                t = t.and_then(|t| t.get(s)).and_then(|v| v.as_table());
            }
            t.is_some_and(|t| t.contains_key("seed"))
        };
        if nested("dcsr", None) || nested("cdm", Some("pretrain")) || nested("synth", None) {
            bail!("stage-level `seed` keys are not allowed; set the top-level `seed`");
        }
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domains;
        if d.sources.contains(&d.target) {
            bail!("domains.sources must not contain the target domain {}", d.target);
        }
        let mut uniq = d.sources.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != d.sources.len() {
            bail!("domains.sources has duplicates");
        }
        self.synthetic().validate().context("synth")?;
        if !(self.split.cold_ratio > 0.0 && self.split.cold_ratio < 1.0) {
            bail!("split.cold_ratio must be in (0, 1)");
        }
        if self.cdm.kinds.is_empty() {
            bail!("cdm.kinds must name at least one model");
        }
        self.cdm.pretrain.validate().context("cdm.pretrain")?;
        self.cdm.oracle.validate().context("cdm.oracle")?;
        self.cdm.mle.validate().context("cdm.mle")?;
        self.dcsr.validate().context("dcsr")?;
        self.grid.validate().context("grid")?;
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let s = &self.synth;
        SyntheticConfig {
            n_examinees: s.n_examinees,
            n_domains: s.n_domains,
            items_per_domain: s.items_per_domain,
            shared_dim: s.shared_dim,
            specific_noise: s.specific_noise,
            n_concepts: s.n_concepts,
            answer_rate: s.answer_rate,
            seed: seed::derive(self.seed, Stream::Synth, 0),
        }
    }

    pub fn target(&self) -> DomainId {
        DomainId(self.domains.target)
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, Stream::Split, 0)
    }

    pub fn pretrain_config(&self, kind: CdmKind) -> PretrainConfig {
        PretrainConfig {
            seed: seed::derive(self.seed, Stream::Pretrain, kind_index(kind)),
            ..self.cdm.pretrain.clone()
        }
    }

    pub fn dcsr_config(&self, kind: CdmKind) -> DcsrConfig {
        DcsrConfig {
            seed: seed::derive(self.seed, Stream::Train, kind_index(kind)),
            ..self.dcsr.clone()
        }
    }

    pub fn session_seed(&self) -> u64 {
        seed::derive(self.seed, Stream::Session, 0)
    }

    /// Hash of everything except file locations, so relocated runs match.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.paths = Paths::default();
        Ok(config_hash(&c)?)
    }
}

fn kind_index(kind: CdmKind) -> u64 {
    match kind {
        CdmKind::Irt => 0,
        CdmKind::Ncd => 1,
    }
}
