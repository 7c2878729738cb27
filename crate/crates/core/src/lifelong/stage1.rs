use candle_core::Tensor;
use serde::Serialize;

use super::state::ModelState;
use super::{effective_batch, EpochLog};
use crate::config::TrainConfig;
use crate::data::{sample_pk_batches, ImageSource, Split};
use crate::error::{Error, Result};
use crate::eval::extract::encode_records;
use crate::losses::contrastive_i2t_t2i;
use crate::optim::AdamW;
use crate::prompts::{text_table, PromptTracking};
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, Default, Serialize)]
pub struct Stage1Report {
    /// Mean `L_i2t + L_t2i` per epoch.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

/// Image-to-text distillation for one domain step.
///
/// Both encoders are frozen; only this step's specific tokens, the shared
/// tokens and the logit scale are updated. Image features come from the
/// current (previous-step) encoder and are computed once.
pub fn run_stage1(
    state: &mut ModelState,
    source: &ImageSource,
    step: usize,
    train: &TrainConfig,
    epochs: usize,
    log: &mut dyn FnMut(EpochLog),
) -> Result<Stage1Report> {
    let mut report = Stage1Report::default();
    if epochs == 0 {
        return Ok(report);
    }
    state.image.freeze();
    state.text.freeze();
    let store = state
        .prompts
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("stage 1 needs a prompt store".into()))?;
    let x = store
        .specific(step)
        .ok_or_else(|| Error::Key(format!("prompts for step {step}")))?;
    let y = store
        .shared()
        .ok_or_else(|| Error::Key("shared prompt tokens".into()))?;

    let ds = source.dataset();
    let train_idx = ds.split_indices(Split::Train);
    let labels: Vec<usize> = train_idx.iter().map(|&i| ds.records[i].identity).collect();
    let feats = encode_records(&state.image, source, &train_idx, train.batch.batch_size)?;

    let mut opt = AdamW::new(train.weight_decay);
    opt.add(x, true)?;
    opt.add(y, true)?;
    opt.add(store.logit_scale(), false)?;

    let spec = effective_batch(&train.batch, ds.num_identities);
    let mut schedule = train.schedule();
    schedule.stage1_epochs = epochs;
    let seed = derive_seed(train.seed, &[tag("stage1"), step as u64]);
    for epoch in 0..epochs {
        let lr = schedule.stage1_learning_rate(epoch)?;
        let batches = sample_pk_batches(&labels, &spec, seed, epoch as u64)?;
        let mut total = 0.0;
        for positions in &batches {
            let pos: Vec<u32> = positions.iter().map(|&p| p as u32).collect();
            let batch_labels: Vec<usize> = positions.iter().map(|&p| labels[p]).collect();
            let image = feats.index_select(&Tensor::new(pos.as_slice(), feats.device())?, 0)?;
            let table = text_table(store, &state.text, step, PromptTracking::ALL)?;
            let (i2t, t2i) = contrastive_i2t_t2i(
                &image,
                &table,
                &batch_labels,
                store.logit_scale().as_tensor(),
            )?;
            let loss = (i2t + t2i)?;
            total += loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            opt.step(&loss.backward()?, lr)?;
            store.clamp_logit_scale()?;
        }
        let mean = total / batches.len().max(1) as f64;
        report.losses.push(mean);
        report.lrs.push(lr);
        log(EpochLog {
            step,
            stage: 1,
            epoch,
            loss: mean,
            lr,
            head_lr: lr,
        });
    }
    Ok(report)
}
