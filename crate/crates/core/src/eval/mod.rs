//! Retrieval evaluation: feature extraction, ranking, reports and forgetting.

pub mod export;
pub mod extract;
pub mod metrics;
pub mod report;

use serde::{Deserialize, Serialize};

pub use export::{export_embeddings, EmbeddingRow, ExportSummary};
pub use extract::{extract_features, ExtractedFeatures, SampleMeta};
pub use metrics::{rank_and_score, ProtocolMode, RankingProtocol, RetrievalScores};
pub use report::{
    aggregate, forgetting_matrix, DomainEntry, DomainReport, EvalReport, ForgettingMatrix,
    GroupAverage, Metric, Visibility,
};

use crate::data::{ClothingState, ImageSource, Split};
use crate::encoders::ImageEncoder;
use crate::error::Result;

/// Evaluation settings shared by the trainer and the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Score CC domains with the cloth-changing protocol.
    pub cc_protocol_for_cc_domains: bool,
    /// Force the cloth-changing protocol on every domain.
    pub force_cc_protocol: bool,
    pub exclude_same_camera: bool,
    pub cmc_depth: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            cc_protocol_for_cc_domains: true,
            force_cc_protocol: false,
            exclude_same_camera: true,
            cmc_depth: 20,
            batch_size: 64,
        }
    }
}

impl EvalSettings {
    pub fn protocol_for(&self, state: ClothingState) -> RankingProtocol {
        let cc = self.force_cc_protocol
            || (self.cc_protocol_for_cc_domains && state == ClothingState::CC);
        RankingProtocol {
            mode: if cc {
                ProtocolMode::Cc
            } else {
                ProtocolMode::Standard
            },
            exclude_same_camera: self.exclude_same_camera,
        }
    }
}

/// Scores one domain's query split against its gallery split.
pub fn evaluate_domain(
    encoder: &ImageEncoder,
    source: &ImageSource,
    settings: &EvalSettings,
) -> Result<DomainReport> {
    let ds = source.dataset();
    let protocol = settings.protocol_for(ds.clothing_state);
    let q = extract_features(encoder, source, Split::Query, settings.batch_size)?;
    let g = extract_features(encoder, source, Split::Gallery, settings.batch_size)?;
    let scores = rank_and_score(
        q.features.view(),
        &q.meta,
        g.features.view(),
        &g.meta,
        &protocol,
        settings.cmc_depth,
    )?;
    Ok(DomainReport::new(&ds.name, protocol.mode, &scores))
}
