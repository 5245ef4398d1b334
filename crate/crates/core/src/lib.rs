//! Cross-domain cold-start ability initialization for adaptive testing.
//!
//! Pretrained diagnosis models of related domains feed a pair of encoders
//! that split an examinee's ability into a domain-shared and a target-specific
//! part. A conditional diffusion model, trained on examinees seen in every
//! domain, then generates a starting ability in the target domain for
//! examinees who have never been tested there.

pub mod catsim;
pub mod cdm;
pub mod csum;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod hcm;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod tape;

pub use catsim::{InitKind, PolicyKind, SessionRecord};
pub use cdm::{AbilityVector, Cdm, CdmKind, MleConfig, PretrainConfig};
pub use data::{
    ConceptId, DomainDataset, DomainId, ExamineeId, QMatrix, QuestionId, ResponseTriple, SplitPlan,
    SyntheticConfig,
};
pub use error::{Error, Result};
pub use eval::{GridConfig, MetricReport};
pub use hcm::{DcsrArtifact, DcsrConfig, LossWeights};
