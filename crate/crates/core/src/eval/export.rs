//! JSON-lines embedding export for external visualization.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::extract::encode_records;
use crate::data::{ImageSource, Split};
use crate::encoders::ImageEncoder;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub domain: String,
    pub identity: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clothing_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<Split>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub prototype: bool,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportSummary {
    pub samples: usize,
    pub prototypes: usize,
}

/// Writes one line per sample of every domain, then one mean row per
/// (domain, identity) flagged `"prototype": true`.
pub fn export_embeddings(
    encoder: &ImageEncoder,
    sources: &[&ImageSource],
    out: impl AsRef<Path>,
    batch: usize,
) -> Result<ExportSummary> {
    if let Some(parent) = out.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = BufWriter::new(fs::File::create(out.as_ref())?);
    let mut summary = ExportSummary {
        samples: 0,
        prototypes: 0,
    };
    for source in sources {
        let ds = source.dataset();
        let indices: Vec<usize> = (0..ds.records.len()).collect();
        let feats = encode_records(encoder, source, &indices, batch)?
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?;
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (&i, feature) in indices.iter().zip(feats) {
            let r = &ds.records[i];
            let acc = sums
                .entry(r.identity)
                .or_insert_with(|| (vec![0.0; feature.len()], 0));
            for (s, &v) in acc.0.iter_mut().zip(&feature) {
                *s += f64::from(v);
            }
            acc.1 += 1;
            let row = EmbeddingRow {
                domain: ds.name.clone(),
                identity: r.identity,
                clothing_id: Some(r.clothing_id),
                split: Some(r.split),
                prototype: false,
                feature,
            };
            serde_json::to_writer(&mut writer, &row)?;
            writer.write_all(b"\n")?;
            summary.samples += 1;
        }
        for (identity, (sum, count)) in sums {
            let row = EmbeddingRow {
                domain: ds.name.clone(),
                identity,
                clothing_id: None,
                split: None,
                prototype: true,
                feature: sum.iter().map(|s| (s / count as f64) as f32).collect(),
            };
            serde_json::to_writer(&mut writer, &row)?;
            writer.write_all(b"\n")?;
            summary.prototypes += 1;
        }
    }
    writer.flush()?;
    Ok(summary)
}
