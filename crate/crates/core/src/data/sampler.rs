use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Identity-balanced batch shape: `batch_size / instances_per_identity`
/// identities with `instances_per_identity` images each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub instances_per_identity: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 64,
            instances_per_identity: 4,
        }
    }
}

impl BatchSpec {
    pub fn new(batch_size: usize, instances_per_identity: usize) -> Result<Self> {
        let spec = Self {
            batch_size,
            instances_per_identity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.instances_per_identity == 0
            || !self.batch_size.is_multiple_of(self.instances_per_identity)
        {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} must be a positive multiple of instances_per_identity {}",
                self.batch_size, self.instances_per_identity
            )));
        }
        Ok(())
    }

    pub fn identities_per_batch(&self) -> usize {
        self.batch_size / self.instances_per_identity
    }
}

/// One PK epoch over `labels` (label of each sample position).
///
/// Returns batches of positions into `labels`. Each identity's samples are
/// shuffled and cut into chunks of K that together cover all of them; short
/// identities and tail chunks are topped up by sampling with replacement.
/// The epoch ends when fewer than P identities have chunks left, so leftover
/// chunks of large identities are only covered across epochs.
pub fn sample_pk_batches(
    labels: &[usize],
    spec: &BatchSpec,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let k = spec.instances_per_identity;
    let p = spec.identities_per_batch();

    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &label) in labels.iter().enumerate() {
        by_label.entry(label).or_default().push(pos);
    }
    if by_label.len() < p {
        return Err(Error::InvalidArgument(format!(
            "{} identities available, batch needs {p}",
            by_label.len()
        )));
    }

    let mut rng = rng_for(seed, &[0x0050_454b, epoch]);
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&label, positions) in &by_label {
        let mut pool = positions.clone();
        pool.shuffle(&mut rng);
        while pool.len() % k != 0 {
            let extra = *positions.choose(&mut rng).expect("non-empty identity");
            pool.push(extra);
        }
        chunks.insert(label, pool.chunks(k).map(<[usize]>::to_vec).collect());
    }

    let mut batches = Vec::new();
    loop {
        let mut available: Vec<usize> = chunks
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(&l, _)| l)
            .collect();
        if available.len() < p {
            break;
        }
        // partial Fisher-Yates for P distinct identities
        for i in 0..p {
            let j = rng.random_range(i..available.len());
            available.swap(i, j);
        }
        let mut batch = Vec::with_capacity(spec.batch_size);
        for label in &available[..p] {
            let chunk = chunks
                .get_mut(label)
                .expect("label present")
                .pop()
                .expect("non-empty");
            batch.extend(chunk);
        }
        batches.push(batch);
    }
    Ok(batches)
}
