use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};

use crate::checkpoint::{assign_named, load_checkpoint, params_digest};
use crate::encoders::{ImageEncoder, ModelConfig, NamedParams, TextEncoder};
use crate::error::{Error, Result};
use crate::kap::{AdaptedClassifier, InitMode};
use crate::prompts::StructuredPromptStore;
use crate::rng::{rng_for, tag};

/// Per-step heads trained in stage 2.
#[derive(Debug)]
pub struct StepHeads {
    /// f^S over projected features.
    pub classifier: AdaptedClassifier,
    /// Linear classifier over pre-projection features.
    pub pre_classifier: Var,
}

/// Everything a lifelong run trains or carries between steps.
#[derive(Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    /// Absent for methods without text guidance.
    pub prompts: Option<StructuredPromptStore>,
    pub heads: BTreeMap<usize, StepHeads>,
}

impl ModelState {
    pub fn new(
        config: &ModelConfig,
        seed: u64,
        with_prompts: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let image = ImageEncoder::new(
            config,
            &mut rng_for(seed, &[tag("image-encoder")]),
            dtype,
            device,
        )?;
        let mut text = TextEncoder::new(
            config,
            &mut rng_for(seed, &[tag("text-encoder")]),
            dtype,
            device,
        )?;
        text.freeze();
        let prompts = if with_prompts {
            Some(StructuredPromptStore::new(
                config.prompt_tokens,
                config.token_dim,
                config.temperature_init,
                dtype,
                device,
            )?)
        } else {
            None
        };
        let mut state = Self {
            config: config.clone(),
            image,
            text,
            prompts,
            heads: BTreeMap::new(),
        };
        if let Some(dir) = &config.pretrained {
            state.load_pretrained(dir)?;
        }
        Ok(state)
    }

    /// Installs externally trained encoder weights (`image.*`, `text.*`).
    pub fn load_pretrained(&mut self, dir: &Path) -> Result<()> {
        let ck = load_checkpoint(dir, self.image.device())?;
        let mut named = self.image.named_params();
        named.extend(self.text.named_params());
        assign_named(&named, &ck.tensors, true)
            .map_err(|e| e.context(format!("pretrained weights {}", dir.display())))?;
        Ok(())
    }

    pub fn named_params(&self) -> NamedParams<'_> {
        let mut out = self.image.named_params();
        out.extend(self.text.named_params());
        if let Some(p) = &self.prompts {
            out.extend(p.named_params());
        }
        for (step, h) in &self.heads {
            out.push((format!("kap.step{step}.classifier"), &h.classifier.weights));
            out.push((format!("kap.step{step}.pre_classifier"), &h.pre_classifier));
        }
        out
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect()
    }

    /// Restores every tensor of a checkpoint. Heads and prompts are recreated
    /// from their names; encoder tensors must all be present.
    pub fn restore(
        &mut self,
        tensors: &BTreeMap<String, Tensor>,
        init_mode: InitMode,
    ) -> Result<()> {
        let mut encoders = self.image.named_params();
        encoders.extend(self.text.named_params());
        assign_named(&encoders, tensors, true)?;
        let dtype = self.image.dtype();
        let mut classifiers: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut pre: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if name.starts_with("image.") || name.starts_with("text.") {
                continue;
            }
            if name.starts_with("prompts.") {
                let store = self.prompts.as_mut().ok_or_else(|| {
                    Error::Key(format!(
                        "`{name}` in a checkpoint for a method without prompts"
                    ))
                })?;
                store.restore(name, t)?;
                continue;
            }
            let parsed = name
                .strip_prefix("kap.step")
                .and_then(|rest| rest.split_once('.'))
                .and_then(|(step, kind)| step.parse::<usize>().ok().map(|s| (s, kind)));
            match parsed {
                Some((step, "classifier")) => {
                    classifiers.insert(step, t.to_dtype(dtype)?);
                }
                Some((step, "pre_classifier")) => {
                    pre.insert(step, t.to_dtype(dtype)?);
                }
                _ => return Err(Error::Key(format!("unexpected checkpoint tensor `{name}`"))),
            }
        }
        self.heads.clear();
        for (step, w) in classifiers {
            let p = pre
                .remove(&step)
                .ok_or_else(|| Error::Key(format!("kap.step{step}.pre_classifier")))?;
            self.heads.insert(
                step,
                StepHeads {
                    classifier: AdaptedClassifier {
                        weights: Var::from_tensor(&w)?,
                        init_mode,
                        trainable: true,
                    },
                    pre_classifier: Var::from_tensor(&p)?,
                },
            );
        }
        if let Some(step) = pre.keys().next() {
            return Err(Error::Key(format!("kap.step{step}.classifier")));
        }
        Ok(())
    }

    pub fn image_digest(&self) -> Result<String> {
        params_digest(&self.image.named_params())
    }

    pub fn text_digest(&self) -> Result<String> {
        params_digest(&self.text.named_params())
    }

    pub fn prompts_digest(&self) -> Result<Option<String>> {
        self.prompts
            .as_ref()
            .map(|p| params_digest(&p.named_params()))
            .transpose()
    }
}
