//! Training objectives.
//!
//! Image/text dot products use L2-normalized image features (and normalized
//! text rows in the contrastive loss). The triplet loss works on raw features
//! with Euclidean distances.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::nn::{l2_normalize_rows, log_softmax_last};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Projection loss against the frozen text table.
    pub lambda1: f64,
    /// Identity losses (projected and pre-projection).
    pub lambda2: f64,
    /// Triplet losses (projected and pre-projection).
    pub lambda3: f64,
    /// Label-smoothing constant.
    pub epsilon: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.25,
            lambda3: 1.0,
            epsilon: 0.1,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.triplet_margin,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights and margin must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Label-smoothed target distribution: `1 - eps + eps/N` on the target,
/// `eps/N` elsewhere.
pub fn smoothed_targets(classes: usize, epsilon: f64, target: usize) -> Vec<f64> {
    let off = epsilon / classes as f64;
    let mut q = vec![off; classes];
    q[target] = 1.0 - epsilon + off;
    q
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} feature rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn check_width(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (rows, d) = a.dims2()?;
    let (classes, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::Shape(format!(
            "feature width {d} vs table width {d2}"
        )));
    }
    Ok((rows, classes))
}

fn finite(loss: Tensor, what: &'static str) -> Result<Tensor> {
    let v: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
    if v.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(what))
    }
}

fn matrix(values: Vec<f64>, rows: usize, cols: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (rows, cols), like.device())?.to_dtype(like.dtype())?)
}

/// Bidirectional image/text contrastive loss.
///
/// `logit_scale` is a one-element tensor holding ln(1/temperature).
/// Returns `(L_i2t, L_t2i)`. The text-to-image direction averages the
/// log-probability over all batch images of an identity, then over the
/// identities present in the batch.
pub fn contrastive_i2t_t2i(
    image_feats: &Tensor,
    text_table: &Tensor,
    labels: &[usize],
    logit_scale: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, n) = check_width(image_feats, text_table)?;
    if b < 2 {
        return Err(Error::Shape(format!(
            "contrastive loss needs B >= 2, got {b}"
        )));
    }
    check_labels(labels, b, n)?;

    let img = l2_normalize_rows(image_feats)?;
    let txt = l2_normalize_rows(text_table)?;
    let scale = logit_scale.reshape(())?.exp()?;
    let logits = img.matmul(&txt.t()?)?.broadcast_mul(&scale)?;

    let mut onehot = vec![0.0; b * n];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * n + y] = 1.0;
    }
    let onehot = matrix(onehot, b, n, &logits)?;
    let i2t = (log_softmax_last(&logits)? * onehot)?
        .sum_all()?
        .affine(-1.0 / b as f64, 0.0)?;

    let mut positives: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        positives.entry(y).or_default().push(i);
    }
    let present: Vec<u32> = positives.keys().map(|&y| y as u32).collect();
    let p = present.len();
    let mut weights = vec![0.0; p * b];
    for (row, members) in positives.values().enumerate() {
        for &i in members {
            weights[row * b + i] = 1.0 / members.len() as f64;
        }
    }
    let weights = matrix(weights, p, b, &logits)?;
    let per_text = logits
        .t()?
        .contiguous()?
        .index_select(&Tensor::new(present.as_slice(), logits.device())?, 0)?;
    let t2i = (log_softmax_last(&per_text)? * weights)?
        .sum_all()?
        .affine(-1.0 / p as f64, 0.0)?;

    Ok((finite(i2t, "L_i2t")?, finite(t2i, "L_t2i")?))
}

/// Label-smoothed cross-entropy of normalized features against classifier rows.
pub fn id_loss(
    features: &Tensor,
    classifier: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor> {
    let (b, n) = check_width(features, classifier)?;
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    check_labels(labels, b, n)?;
    let logits = l2_normalize_rows(features)?.matmul(&classifier.t()?)?;
    let q: Vec<f64> = labels
        .iter()
        .flat_map(|&y| smoothed_targets(n, epsilon, y))
        .collect();
    let q = matrix(q, b, n, &logits)?;
    let loss = (log_softmax_last(&logits)? * q)?
        .sum_all()?
        .affine(-1.0 / b as f64, 0.0)?;
    finite(loss, "L_id")
}

/// [`id_loss`] against a frozen text table; no gradient reaches the table.
pub fn proj_loss(
    features: &Tensor,
    text_table_frozen: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor> {
    id_loss(features, &text_table_frozen.detach(), labels, epsilon).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("L_proj"),
        other => other,
    })
}

/// Batch-hard triplet loss on Euclidean distances of raw features.
pub fn triplet_loss(features: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    let (b, _) = features.dims2()?;
    check_labels(labels, b, usize::MAX)?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateBatch(
            "triplet loss needs >= 2 identities".into(),
        ));
    }
    let sq = features.sqr()?.sum_keepdim(D::Minus1)?;
    let gram = features.matmul(&features.t()?)?;
    let d2 = sq.broadcast_add(&sq.t()?)?.sub(&gram.affine(2.0, 0.0)?)?;
    let dist = d2.clamp(1e-12, f64::INFINITY)?.sqrt()?;

    let host = dist.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut pos_idx = Vec::with_capacity(b);
    let mut neg_idx = Vec::with_capacity(b);
    for i in 0..b {
        let (mut hp, mut hn) = (i, usize::MAX);
        for j in 0..b {
            if labels[j] == labels[i] {
                if host[i][j] > host[i][hp] {
                    hp = j;
                }
            } else if hn == usize::MAX || host[i][j] < host[i][hn] {
                hn = j;
            }
        }
        pos_idx.push((i * b + hp) as u32);
        neg_idx.push((i * b + hn) as u32);
    }
    let flat = dist.flatten_all()?;
    let dev = features.device();
    let dp = flat.index_select(&Tensor::new(pos_idx.as_slice(), dev)?, 0)?;
    let dn = flat.index_select(&Tensor::new(neg_idx.as_slice(), dev)?, 0)?;
    let loss = (dp - dn)?.affine(1.0, margin)?.relu()?.mean_all()?;
    finite(loss, "L_tri")
}

/// Component losses of one stage-2 batch. `None` marks a term not computed.
#[derive(Debug, Clone, Default)]
pub struct Stage2Losses {
    pub proj: Option<Tensor>,
    pub id: Option<Tensor>,
    pub id_pre: Option<Tensor>,
    pub tri: Option<Tensor>,
    pub tri_pre: Option<Tensor>,
}

/// `λ1·L_proj + λ2·(L^b_id + L_id) + λ3·(L^b_tri + L_tri)`.
///
/// Terms with a zero weight are left out of the graph entirely.
pub fn stage2_total(losses: &Stage2Losses, weights: &LossWeights) -> Result<Tensor> {
    let groups: [(f64, &str, Vec<&Option<Tensor>>); 3] = [
        (weights.lambda1, "L_proj", vec![&losses.proj]),
        (weights.lambda2, "L_id", vec![&losses.id_pre, &losses.id]),
        (weights.lambda3, "L_tri", vec![&losses.tri_pre, &losses.tri]),
    ];
    let mut total: Option<Tensor> = None;
    for (lambda, name, terms) in groups {
        if lambda == 0.0 {
            continue;
        }
        for term in terms {
            let term = term.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("{name} weighted {lambda} but not computed"))
            })?;
            let scaled = term.affine(lambda, 0.0)?;
            total = Some(match total {
                Some(t) => (t + scaled)?,
                None => scaled,
            });
        }
    }
    total.ok_or_else(|| Error::InvalidArgument("every stage-2 loss weight is zero".into()))
}
