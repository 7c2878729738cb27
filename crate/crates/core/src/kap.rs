//! Knowledge adaptation and projection: the adapted classifier, its
//! initialization from text embeddings or image prototypes, and the
//! slow-paced learning-rate schedule.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSource, Split};
use crate::encoders::nn::{l2_normalize_rows, trunc_normal_var, INIT_STD};
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::eval::extract::encode_records;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InitMode {
    /// Row-normalized stage-1 text table.
    #[default]
    #[serde(rename = "KA_T")]
    KaT,
    /// Row-normalized per-identity mean image features.
    #[serde(rename = "KA_V")]
    KaV,
    #[serde(rename = "RANDOM")]
    Random,
}

#[derive(Debug)]
pub struct AdaptedClassifier {
    pub weights: Var,
    pub init_mode: InitMode,
    pub trainable: bool,
}

impl AdaptedClassifier {
    pub fn num_classes(&self) -> usize {
        self.weights.dims()[0]
    }
}

/// Inputs for [`init_classifier`]; only the one matching the mode is needed.
#[derive(Debug, Default)]
pub struct ClassifierSources<'a> {
    pub text_table: Option<&'a Tensor>,
    pub prototypes: Option<&'a Tensor>,
    pub random: Option<RandomInit>,
}

#[derive(Debug, Clone)]
pub struct RandomInit {
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub dtype: DType,
    pub device: Device,
}

pub fn init_classifier(
    mode: InitMode,
    sources: &ClassifierSources<'_>,
) -> Result<AdaptedClassifier> {
    let rows = match mode {
        InitMode::KaT => sources
            .text_table
            .ok_or(Error::MissingSource("text table"))?
            .clone(),
        InitMode::KaV => sources
            .prototypes
            .ok_or(Error::MissingSource("image prototypes"))?
            .clone(),
        InitMode::Random => {
            let r = sources
                .random
                .as_ref()
                .ok_or(Error::MissingSource("random init shape"))?;
            let mut rng = rng_for(r.seed, &[0x434c_4153]);
            trunc_normal_var(&mut rng, &[r.classes, r.dim], INIT_STD, r.dtype, &r.device)?
                .as_tensor()
                .clone()
        }
    };
    if rows.rank() != 2 || rows.dims()[0] == 0 {
        return Err(Error::Shape(format!(
            "classifier source must be (N, d), got {:?}",
            rows.dims()
        )));
    }
    let weights = Var::from_tensor(&l2_normalize_rows(&rows.detach())?)?;
    Ok(AdaptedClassifier {
        weights,
        init_mode: mode,
        trainable: true,
    })
}

/// Per-identity mean of projected train features: (N, d), unnormalized.
pub fn image_prototypes(
    encoder: &ImageEncoder,
    source: &ImageSource,
    batch: usize,
) -> Result<Tensor> {
    let ds = source.dataset();
    let train = ds.split_indices(Split::Train);
    let labels: Vec<usize> = train.iter().map(|&i| ds.records[i].identity).collect();
    let feats = encode_records(encoder, source, &train, batch)?;
    let dtype = feats.dtype();
    let rows = feats.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let d = rows.first().map_or(0, Vec::len);
    let n = ds.num_identities;
    let mut sums = vec![vec![0.0f64; d]; n];
    let mut counts = vec![0usize; n];
    for (row, &label) in rows.iter().zip(&labels) {
        counts[label] += 1;
        for (s, v) in sums[label].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyIdentity(empty));
    }
    let flat: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |v| v / c as f64))
        .collect();
    Ok(Tensor::from_vec(flat, (n, d), feats.device())?.to_dtype(dtype)?)
}

/// Stage-1 plan: cosine decay from `lr` over `epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Plan {
    pub lr: f64,
}

impl Default for Stage1Plan {
    fn default() -> Self {
        Self { lr: 3.5e-4 }
    }
}

/// Stage-2 plan for the first domain: linear warmup, plateau, step decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Plan {
    pub warmup_start_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for Stage2Plan {
    fn default() -> Self {
        Self {
            warmup_start_lr: 5e-7,
            peak_lr: 5e-6,
            warmup_epochs: 10,
            decay_epoch: 40,
            decay_factor: 0.1,
        }
    }
}

/// Which stage-2 parameter groups get the slowed learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowPaceScope {
    #[default]
    All,
    /// Classifier and prompts only; the image encoder keeps the first-domain plan.
    HeadsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlowPacedSchedule {
    pub stage1: Stage1Plan,
    pub stage1_epochs: usize,
    pub stage2: Stage2Plan,
    pub stage2_epochs: usize,
    pub slow_factor: f64,
}

impl Default for SlowPacedSchedule {
    fn default() -> Self {
        Self {
            stage1: Stage1Plan::default(),
            stage1_epochs: 120,
            stage2: Stage2Plan::default(),
            stage2_epochs: 60,
            slow_factor: 10.0,
        }
    }
}

impl SlowPacedSchedule {
    fn first_domain_lr(&self, epoch: usize) -> f64 {
        let p = &self.stage2;
        if epoch < p.warmup_epochs {
            let span = p.warmup_epochs.saturating_sub(1).max(1) as f64;
            let frac = if p.warmup_epochs <= 1 {
                1.0
            } else {
                epoch as f64 / span
            };
            p.warmup_start_lr + (p.peak_lr - p.warmup_start_lr) * frac
        } else if epoch < p.decay_epoch {
            p.peak_lr
        } else {
            p.peak_lr * p.decay_factor
        }
    }

    /// Stage-2 learning rate; `domain_index` is 1-based. Every domain after
    /// the first runs the first-domain plan divided by `slow_factor`.
    pub fn stage2_learning_rate(&self, domain_index: usize, epoch: usize) -> Result<f64> {
        if epoch >= self.stage2_epochs {
            return Err(Error::InvalidEpoch {
                epoch,
                horizon: self.stage2_epochs,
            });
        }
        if domain_index == 0 {
            return Err(Error::InvalidArgument("domain_index is 1-based".into()));
        }
        let lr = self.first_domain_lr(epoch);
        Ok(if domain_index == 1 {
            lr
        } else {
            lr / self.slow_factor
        })
    }

    pub fn stage1_learning_rate(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.stage1_epochs {
            return Err(Error::InvalidEpoch {
                epoch,
                horizon: self.stage1_epochs,
            });
        }
        let progress = epoch as f64 / self.stage1_epochs as f64;
        Ok(0.5 * self.stage1.lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Which parameter groups receive stage-2 gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GradientRouting {
    pub image_encoder: bool,
    pub classifier: bool,
    pub pre_classifier: bool,
    pub prompts: bool,
    pub text_encoder: bool,
}

/// Stage-2 routing. With prompt tuning enabled, gradients also flow into the
/// prompt tokens; the text encoder stays frozen either way.
pub fn stage2_prompt_tuning_hook(enabled: bool) -> GradientRouting {
    GradientRouting {
        image_encoder: true,
        classifier: true,
        pre_classifier: true,
        prompts: enabled,
        text_encoder: false,
    }
}
