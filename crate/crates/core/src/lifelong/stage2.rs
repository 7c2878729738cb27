use candle_core::{DType, Tensor};
use serde::Serialize;

use super::state::{ModelState, StepHeads};
use super::{effective_batch, EpochLog, Recipe};
use crate::config::{PromptTuningScope, TrainConfig};
use crate::data::{sample_pk_batches, ImageSource, Split};
use crate::encoders::image::images_to_tensor;
use crate::error::{Error, Result};
use crate::kap::{
    image_prototypes, init_classifier, stage2_prompt_tuning_hook, ClassifierSources, InitMode,
    RandomInit, SlowPaceScope,
};
use crate::losses::{id_loss, proj_loss, stage2_total, triplet_loss, LossWeights, Stage2Losses};
use crate::optim::AdamW;
use crate::prompts::{text_table, PromptTracking};
use crate::rng::{derive_seed, rng_for, tag};

#[derive(Debug, Clone, Default, Serialize)]
pub struct Stage2Report {
    /// Mean weighted total loss per epoch.
    pub losses: Vec<f64>,
    /// Image-encoder learning rate per epoch.
    pub lrs: Vec<f64>,
    /// Classifier/prompt learning rate per epoch.
    pub head_lrs: Vec<f64>,
    pub init_mode: Option<InitMode>,
    pub prompt_tuning: bool,
}

/// Classifier initialization for a step, as consumed by stage 2.
#[derive(Debug)]
pub struct Stage2Init {
    /// Text table captured before stage 2; `None` without text guidance.
    pub frozen_table: Option<Tensor>,
    pub heads: StepHeads,
}

/// Builds the frozen table and both classifiers for `step` from the current
/// (previous-step) encoder and this step's prompts.
pub fn prepare_stage2(
    state: &ModelState,
    source: &ImageSource,
    step: usize,
    train: &TrainConfig,
    recipe: Recipe,
) -> Result<Stage2Init> {
    let ds = source.dataset();
    let n = ds.num_identities;
    let dtype = state.image.dtype();
    let device = state.image.device().clone();
    let random = |what: &str, dim: usize| RandomInit {
        classes: n,
        dim,
        seed: derive_seed(train.seed, &[tag(what), step as u64]),
        dtype,
        device: device.clone(),
    };
    let frozen_table = if recipe.text_guided {
        let store = state
            .prompts
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("text guidance needs a prompt store".into()))?;
        Some(text_table(store, &state.text, step, PromptTracking::NONE)?.detach())
    } else {
        None
    };
    let mode = if recipe.text_guided {
        train.init_mode
    } else {
        InitMode::Random
    };
    let prototypes = if mode == InitMode::KaV {
        Some(image_prototypes(
            &state.image,
            source,
            train.batch.batch_size,
        )?)
    } else {
        None
    };
    let classifier = init_classifier(
        mode,
        &ClassifierSources {
            text_table: frozen_table.as_ref(),
            prototypes: prototypes.as_ref(),
            random: Some(random("classifier", state.config.embed_dim)),
        },
    )?;
    let pre = init_classifier(
        InitMode::Random,
        &ClassifierSources {
            random: Some(random("pre-classifier", state.config.pre_dim())),
            ..Default::default()
        },
    )?;
    Ok(Stage2Init {
        frozen_table,
        heads: StepHeads {
            classifier,
            pre_classifier: pre.weights,
        },
    })
}

/// Text-to-image guidance for one domain step. Trains the image encoder,
/// both classifiers and, with the tuning hook, the prompt tokens. The text
/// encoder is never updated.
#[allow(clippy::too_many_arguments)]
pub fn run_stage2(
    state: &mut ModelState,
    source: &ImageSource,
    step: usize,
    domain_index: usize,
    init: Stage2Init,
    train: &TrainConfig,
    recipe: Recipe,
    epochs: usize,
    log: &mut dyn FnMut(EpochLog),
) -> Result<Stage2Report> {
    let Stage2Init {
        frozen_table,
        heads,
    } = init;
    state.text.freeze();
    state.image.unfreeze();
    let routing = stage2_prompt_tuning_hook(train.prompt_tuning && recipe.text_guided);
    let tracking = match (routing.prompts, train.prompt_tuning_scope) {
        (false, _) => PromptTracking::NONE,
        (true, PromptTuningScope::Both) => PromptTracking::ALL,
        (true, PromptTuningScope::Specific) => PromptTracking {
            specific: true,
            shared: false,
        },
        (true, PromptTuningScope::Shared) => PromptTracking {
            specific: false,
            shared: true,
        },
    };

    let mut weights: LossWeights = train.weights;
    if !recipe.text_guided {
        weights.lambda1 = 0.0;
    }

    let mut image_opt = AdamW::new(train.weight_decay);
    for (_, var) in state.image.named_params() {
        image_opt.add(var, var.rank() >= 2)?;
    }
    let mut head_opt = AdamW::new(train.weight_decay);
    head_opt.add(&heads.classifier.weights, true)?;
    head_opt.add(&heads.pre_classifier, true)?;
    if let Some(store) = &state.prompts {
        if tracking.specific {
            head_opt.add(
                store
                    .specific(step)
                    .ok_or_else(|| Error::Key(format!("prompts for step {step}")))?,
                true,
            )?;
        }
        if tracking.shared {
            head_opt.add(
                store
                    .shared()
                    .ok_or_else(|| Error::Key("shared prompt tokens".into()))?,
                true,
            )?;
        }
    }

    let ds = source.dataset();
    let (h, w) = (ds.image_height, ds.image_width);
    let train_idx = ds.split_indices(Split::Train);
    let labels: Vec<usize> = train_idx.iter().map(|&i| ds.records[i].identity).collect();
    let spec = effective_batch(&train.batch, ds.num_identities);
    let mut schedule = train.schedule();
    schedule.stage2_epochs = epochs;
    let head_domain = if recipe.slow_paced { domain_index } else { 1 };
    let image_domain = match train.slow_pace_scope {
        SlowPaceScope::All => head_domain,
        SlowPaceScope::HeadsOnly => 1,
    };
    let seed = derive_seed(train.seed, &[tag("stage2"), step as u64]);
    let mut report = Stage2Report {
        init_mode: Some(heads.classifier.init_mode),
        prompt_tuning: routing.prompts,
        ..Default::default()
    };

    for epoch in 0..epochs {
        let lr = schedule.stage2_learning_rate(image_domain, epoch)?;
        let head_lr = schedule.stage2_learning_rate(head_domain, epoch)?;
        let batches = sample_pk_batches(&labels, &spec, seed, epoch as u64)?;
        let mut total = 0.0;
        for (b, positions) in batches.iter().enumerate() {
            let records: Vec<usize> = positions.iter().map(|&p| train_idx[p]).collect();
            let batch_labels: Vec<usize> = positions.iter().map(|&p| labels[p]).collect();
            let mut pixels = source.pixels(&records)?;
            if train.augment.enabled {
                let mut rng = rng_for(seed, &[tag("augment"), epoch as u64, b as u64]);
                for image in pixels.chunks_mut(h * w * 3) {
                    train.augment.apply(image, h, w, &mut rng);
                }
            }
            let images = images_to_tensor(
                pixels,
                records.len(),
                h,
                w,
                state.image.dtype(),
                state.image.device(),
            )?;
            let out = state.image.encode_images(&images)?;
            let live_table;
            let proj_target = match (&frozen_table, &state.prompts) {
                (Some(_), Some(store)) if routing.prompts => {
                    live_table = text_table(store, &state.text, step, tracking)?;
                    Some(&live_table)
                }
                (table, _) => table.as_ref(),
            };
            let losses = Stage2Losses {
                proj: match proj_target {
                    Some(t) if weights.lambda1 > 0.0 && routing.prompts => {
                        Some(id_loss(&out.feat, t, &batch_labels, weights.epsilon)?)
                    }
                    Some(t) if weights.lambda1 > 0.0 => {
                        Some(proj_loss(&out.feat, t, &batch_labels, weights.epsilon)?)
                    }
                    _ => None,
                },
                id: Some(id_loss(
                    &out.feat,
                    heads.classifier.weights.as_tensor(),
                    &batch_labels,
                    weights.epsilon,
                )?),
                id_pre: Some(id_loss(
                    &out.pre,
                    heads.pre_classifier.as_tensor(),
                    &batch_labels,
                    weights.epsilon,
                )?),
                tri: Some(triplet_loss(
                    &out.feat,
                    &batch_labels,
                    weights.triplet_margin,
                )?),
                tri_pre: Some(triplet_loss(
                    &out.pre,
                    &batch_labels,
                    weights.triplet_margin,
                )?),
            };
            let loss = stage2_total(&losses, &weights)?;
            total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let grads = loss.backward()?;
            image_opt.step(&grads, lr)?;
            head_opt.step(&grads, head_lr)?;
        }
        let mean = total / batches.len().max(1) as f64;
        report.losses.push(mean);
        report.lrs.push(lr);
        report.head_lrs.push(head_lr);
        log(EpochLog {
            step,
            stage: 2,
            epoch,
            loss: mean,
            lr,
            head_lr,
        });
    }
    state.image.freeze();
    state.heads.insert(step, heads);
    Ok(report)
}
