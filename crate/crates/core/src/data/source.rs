//! Audited image access.
//!
//! Every image read goes through an [`ImageSource`], which reports to a shared
//! [`AccessAuditor`]. Once a domain is closed, reading its train split is a
//! data leak: the read is refused and logged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use super::dataset::{DomainDataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Default)]
struct AuditState {
    closed: BTreeSet<String>,
    reads: BTreeMap<(String, Split), usize>,
    violations: Vec<String>,
}

#[derive(Debug, Default)]
pub struct AccessAuditor {
    state: Mutex<AuditState>,
}

impl AccessAuditor {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn record(&self, domain: &str, split: Split, count: usize) -> Result<()> {
        let mut state = self.state.lock().expect("auditor lock");
        if split == Split::Train && state.closed.contains(domain) {
            let message = format!("{count} train reads of closed domain `{domain}`");
            state.violations.push(message.clone());
            return Err(Error::DataLeak(message));
        }
        *state.reads.entry((domain.to_string(), split)).or_insert(0) += count;
        Ok(())
    }

    /// Marks a domain's training step as finished.
    pub fn close(&self, domain: &str) {
        self.state
            .lock()
            .expect("auditor lock")
            .closed
            .insert(domain.to_string());
    }

    pub fn is_closed(&self, domain: &str) -> bool {
        self.state
            .lock()
            .expect("auditor lock")
            .closed
            .contains(domain)
    }

    pub fn reads(&self, domain: &str, split: Split) -> usize {
        self.state
            .lock()
            .expect("auditor lock")
            .reads
            .get(&(domain.to_string(), split))
            .copied()
            .unwrap_or(0)
    }

    pub fn violations(&self) -> Vec<String> {
        self.state.lock().expect("auditor lock").violations.clone()
    }
}

/// A dataset plus a decoded-image cache, with every access audited.
#[derive(Debug)]
pub struct ImageSource {
    dataset: Arc<DomainDataset>,
    auditor: Arc<AccessAuditor>,
    cache: Mutex<HashMap<usize, Arc<Vec<f32>>>>,
}

impl ImageSource {
    pub fn new(dataset: Arc<DomainDataset>, auditor: Arc<AccessAuditor>) -> Self {
        Self {
            dataset,
            auditor,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dataset(&self) -> &DomainDataset {
        &self.dataset
    }

    pub fn auditor(&self) -> &Arc<AccessAuditor> {
        &self.auditor
    }

    /// Concatenated HWC pixels for `indices` (record indices), in order.
    pub fn pixels(&self, indices: &[usize]) -> Result<Vec<f32>> {
        let mut per_split: BTreeMap<Split, usize> = BTreeMap::new();
        for &i in indices {
            let record =
                self.dataset.records.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("record index {i} out of range"))
                })?;
            *per_split.entry(record.split).or_insert(0) += 1;
        }
        for (split, count) in per_split {
            self.auditor.record(&self.dataset.name, split, count)?;
        }
        let mut out = Vec::with_capacity(indices.len() * self.dataset.image_len());
        for &i in indices {
            out.extend_from_slice(&self.image(i)?);
        }
        Ok(out)
    }

    fn image(&self, index: usize) -> Result<Arc<Vec<f32>>> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(&index) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(self.dataset.read_image(index)?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(index, Arc::clone(&img));
        Ok(img)
    }
}
