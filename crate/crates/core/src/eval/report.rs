use serde::{Deserialize, Serialize};

use super::metrics::{ProtocolMode, RetrievalScores};
use crate::data::ClothingState;
use crate::error::{Error, Result};

/// Per-domain report, serialized as `<domain>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainReport {
    pub domain: String,
    pub protocol: ProtocolMode,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub cmc: Vec<f64>,
    pub dropped_queries: usize,
}

impl DomainReport {
    pub fn new(domain: &str, protocol: ProtocolMode, scores: &RetrievalScores) -> Self {
        Self {
            domain: domain.to_string(),
            protocol,
            map: scores.map,
            rank1: scores.rank1(),
            cmc: scores.cmc.clone(),
            dropped_queries: scores.dropped_queries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub report: DomainReport,
    pub clothing_state: ClothingState,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAverage {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub domains: Vec<String>,
}

/// All domain reports after one step, with unweighted group averages.
/// Empty groups are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub entries: Vec<DomainEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seen_sc: Option<GroupAverage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seen_cc: Option<GroupAverage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unseen_sc: Option<GroupAverage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unseen_cc: Option<GroupAverage>,
}

impl EvalReport {
    pub fn entry(&self, domain: &str) -> Option<&DomainEntry> {
        self.entries.iter().find(|e| e.report.domain == domain)
    }
}

fn group(entries: &[DomainEntry], vis: Visibility, state: ClothingState) -> Option<GroupAverage> {
    let members: Vec<&DomainEntry> = entries
        .iter()
        .filter(|e| e.visibility == vis && e.clothing_state == state)
        .collect();
    if members.is_empty() {
        return None;
    }
    let n = members.len() as f64;
    Some(GroupAverage {
        map: members.iter().map(|e| e.report.map).sum::<f64>() / n,
        rank1: members.iter().map(|e| e.report.rank1).sum::<f64>() / n,
        domains: members.iter().map(|e| e.report.domain.clone()).collect(),
    })
}

pub fn aggregate(entries: Vec<DomainEntry>, step: usize) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument(
            "no domain reports to aggregate".into(),
        ));
    }
    Ok(EvalReport {
        step,
        seen_sc: group(&entries, Visibility::Seen, ClothingState::SC),
        seen_cc: group(&entries, Visibility::Seen, ClothingState::CC),
        unseen_sc: group(&entries, Visibility::Unseen, ClothingState::SC),
        unseen_cc: group(&entries, Visibility::Unseen, ClothingState::CC),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "mAP")]
    Map,
    #[serde(rename = "rank1")]
    Rank1,
}

impl Metric {
    fn of(self, report: &DomainReport) -> f64 {
        match self {
            Metric::Map => report.map,
            Metric::Rank1 => report.rank1,
        }
    }
}

/// `values[t][i]`: metric on seen domain `i` after step `t`, lower-triangular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    pub metric: Metric,
    pub domains: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Best value over the stream minus the final value, per domain.
    pub forgetting: Vec<f64>,
}

/// Builds the per-step matrix from step reports ordered by step. Domains are
/// ordered by the step that first reports them as seen.
pub fn forgetting_matrix(reports: &[EvalReport], metric: Metric) -> ForgettingMatrix {
    let mut domains: Vec<String> = Vec::new();
    for r in reports {
        for e in r
            .entries
            .iter()
            .filter(|e| e.visibility == Visibility::Seen)
        {
            if !domains.contains(&e.report.domain) {
                domains.push(e.report.domain.clone());
            }
        }
    }
    let values: Vec<Vec<Option<f64>>> = reports
        .iter()
        .map(|r| {
            domains
                .iter()
                .map(|d| {
                    r.entry(d)
                        .filter(|e| e.visibility == Visibility::Seen)
                        .map(|e| metric.of(&e.report))
                })
                .collect()
        })
        .collect();
    let forgetting = (0..domains.len())
        .map(|i| {
            let column: Vec<f64> = values.iter().filter_map(|row| row[i]).collect();
            let best = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            match values.last().and_then(|row| row[i]) {
                Some(last) if best.is_finite() => best - last,
                _ => 0.0,
            }
        })
        .collect();
    ForgettingMatrix {
        metric,
        domains,
        values,
        forgetting,
    }
}
