//! Structured semantic prompts: per-identity specific tokens X and a single
//! set of shared tokens Y, interleaved as X_1 Y_1 ... X_M Y_M inside the
//! template "[start] a photo of a ... person . [end]".

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::encoders::nn::{param, trunc_normal_var, NamedParams, INIT_STD};
use crate::encoders::{PromptSequence, TextEncoder};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Bounds on the contrastive logit scale, i.e. temperature in [0.01, 1].
pub const LOGIT_SCALE_MIN: f64 = 0.0;
pub const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_092; // ln(100)

/// Which prompt tensors take part in autograd when building slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTracking {
    pub specific: bool,
    pub shared: bool,
}

impl PromptTracking {
    pub const NONE: Self = Self {
        specific: false,
        shared: false,
    };
    pub const ALL: Self = Self {
        specific: true,
        shared: true,
    };
}

#[derive(Debug)]
pub struct StructuredPromptStore {
    tokens: usize,
    token_dim: usize,
    dtype: DType,
    device: Device,
    shared: Option<Var>,
    specific: BTreeMap<usize, Var>,
    logit_scale: Var,
}

impl StructuredPromptStore {
    pub fn new(
        tokens: usize,
        token_dim: usize,
        temperature_init: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let scale = Tensor::new(&[(1.0 / temperature_init).ln()], device)?.to_dtype(dtype)?;
        Ok(Self {
            tokens,
            token_dim,
            dtype,
            device: device.clone(),
            shared: None,
            specific: BTreeMap::new(),
            logit_scale: Var::from_tensor(&scale)?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Allocates X for a new domain step; allocates Y on the first call only.
    pub fn init_domain_prompts(
        &mut self,
        step: usize,
        num_identities: usize,
        seed: u64,
    ) -> Result<()> {
        if self.specific.contains_key(&step) {
            return Err(Error::AlreadyInitialized(step));
        }
        if num_identities == 0 {
            return Err(Error::InvalidArgument("domain has no identities".into()));
        }
        if self.shared.is_none() {
            let mut rng = rng_for(seed, &[0x5348_4152_4544]);
            self.shared = Some(trunc_normal_var(
                &mut rng,
                &[self.tokens, self.token_dim],
                INIT_STD,
                self.dtype,
                &self.device,
            )?);
        }
        let mut rng = rng_for(seed, &[0x5350_4543, step as u64]);
        let x = trunc_normal_var(
            &mut rng,
            &[num_identities, self.tokens, self.token_dim],
            INIT_STD,
            self.dtype,
            &self.device,
        )?;
        self.specific.insert(step, x);
        Ok(())
    }

    pub fn shared(&self) -> Option<&Var> {
        self.shared.as_ref()
    }

    pub fn specific(&self, step: usize) -> Option<&Var> {
        self.specific.get(&step)
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.specific.keys().copied()
    }

    pub fn num_identities(&self, step: usize) -> Result<usize> {
        Ok(self.specific_var(step)?.dims()[0])
    }

    pub fn logit_scale(&self) -> &Var {
        &self.logit_scale
    }

    pub fn temperature(&self) -> Result<f64> {
        let s: f64 = self
            .logit_scale
            .as_tensor()
            .to_dtype(DType::F64)?
            .squeeze(0)?
            .to_scalar()?;
        Ok((-s).exp())
    }

    /// Keeps the effective temperature inside [0.01, 1].
    pub fn clamp_logit_scale(&self) -> Result<()> {
        let clamped = self
            .logit_scale
            .as_tensor()
            .clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)?;
        self.logit_scale.set(&clamped)?;
        Ok(())
    }

    fn specific_var(&self, step: usize) -> Result<&Var> {
        self.specific
            .get(&step)
            .ok_or_else(|| Error::Key(format!("prompts for step {step}")))
    }

    fn shared_var(&self) -> Result<&Var> {
        self.shared
            .as_ref()
            .ok_or_else(|| Error::Key("shared prompt tokens".into()))
    }

    /// Prompt for one identity of one step.
    pub fn compose(&self, step: usize, identity: usize) -> Result<PromptSequence> {
        let x = self.specific_var(step)?;
        let n = x.dims()[0];
        if identity >= n {
            return Err(Error::Key(format!(
                "identity {identity} of step {step} (has {n})"
            )));
        }
        let x = x.as_tensor().get(identity)?;
        let y = self.shared_var()?.as_tensor();
        Ok(PromptSequence {
            slots: interleave(&x.unsqueeze(0)?, y)?.squeeze(0)?,
        })
    }

    /// Slot blocks for every identity of `step`: (N, 2M, d_tok).
    pub fn slots(&self, step: usize, tracking: PromptTracking) -> Result<Tensor> {
        let x = param(self.specific_var(step)?, tracking.specific);
        let y = param(self.shared_var()?, tracking.shared);
        interleave(&x, &y)
    }

    pub fn named_params(&self) -> NamedParams<'_> {
        let mut out: NamedParams<'_> = Vec::new();
        if let Some(y) = &self.shared {
            out.push(("prompts.shared".into(), y));
        }
        for (step, x) in &self.specific {
            out.push((format!("prompts.step{step}.specific"), x));
        }
        out.push(("prompts.logit_scale".into(), &self.logit_scale));
        out
    }

    /// Installs tensors by checkpoint name (`prompts.*`).
    pub fn restore(&mut self, name: &str, tensor: &Tensor) -> Result<bool> {
        let tensor = tensor.to_dtype(self.dtype)?;
        if name == "prompts.shared" {
            self.shared = Some(Var::from_tensor(&tensor)?);
        } else if name == "prompts.logit_scale" {
            self.logit_scale.set(&tensor)?;
        } else if let Some(step) = name
            .strip_prefix("prompts.step")
            .and_then(|s| s.strip_suffix(".specific"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            self.specific.insert(step, Var::from_tensor(&tensor)?);
        } else {
            return Ok(false);
        }
        Ok(true)
    }
}

/// (N, M, d) specific + (M, d) shared -> (N, 2M, d) as X_1, Y_1, ..., X_M, Y_M.
fn interleave(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, m, d) = x.dims3()?;
    let y = y.unsqueeze(0)?.broadcast_as((n, m, d))?;
    Ok(Tensor::stack(&[x, &y], 2)?.reshape((n, 2 * m, d))?)
}

/// Text-embedding table for a step: row j encodes identity j's prompt.
pub fn text_table(
    store: &StructuredPromptStore,
    encoder: &TextEncoder,
    step: usize,
    tracking: PromptTracking,
) -> Result<Tensor> {
    encoder.encode_slots(&store.slots(step, tracking)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;

    fn store(m: usize) -> StructuredPromptStore {
        StructuredPromptStore::new(m, 32, 0.07, DType::F32, &Device::Cpu).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    #[test]
    fn first_domain_allocates_both_token_sets() {
        let mut s = store(16);
        s.init_domain_prompts(0, 8, 0).unwrap();
        assert_eq!(s.specific(0).unwrap().dims(), &[8, 16, 32]);
        assert_eq!(s.shared().unwrap().dims(), &[16, 32]);
        assert!((s.temperature().unwrap() - 0.07).abs() < 1e-6);
    }

    #[test]
    fn shared_tokens_survive_new_domains() {
        let mut s = store(4);
        s.init_domain_prompts(0, 3, 0).unwrap();
        let before = s.shared().unwrap().as_tensor().id();
        s.init_domain_prompts(1, 5, 0).unwrap();
        assert_eq!(s.shared().unwrap().as_tensor().id(), before);
        assert_eq!(s.specific(1).unwrap().dims(), &[5, 4, 32]);
    }

    #[test]
    fn reinit_is_rejected() {
        let mut s = store(2);
        s.init_domain_prompts(0, 3, 0).unwrap();
        assert!(matches!(
            s.init_domain_prompts(0, 3, 0),
            Err(Error::AlreadyInitialized(0))
        ));
    }

    #[test]
    fn compose_interleaves_specific_and_shared() {
        let mut s = store(2);
        s.init_domain_prompts(0, 7, 0).unwrap();
        let seq = s.compose(0, 5).unwrap();
        let slots = rows(&seq.slots);
        let x = s
            .specific(0)
            .unwrap()
            .as_tensor()
            .get(5)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        let y = rows(s.shared().unwrap().as_tensor());
        assert_eq!(
            slots,
            vec![x[0].clone(), y[0].clone(), x[1].clone(), y[1].clone()]
        );
    }

    #[test]
    fn sixteen_pairs_compose_to_forty_tokens() {
        let mut s = store(16);
        s.init_domain_prompts(0, 2, 0).unwrap();
        assert_eq!(s.compose(0, 1).unwrap().len(), 40);
    }

    #[test]
    fn identities_differ_only_in_specific_slots() {
        let mut s = store(3);
        s.init_domain_prompts(0, 8, 0).unwrap();
        s.init_domain_prompts(1, 8, 0).unwrap();
        let a = rows(&s.compose(0, 5).unwrap().slots);
        let b = rows(&s.compose(0, 6).unwrap().slots);
        let c = rows(&s.compose(1, 2).unwrap().slots);
        for i in 0..6 {
            if i % 2 == 1 {
                assert_eq!(a[i], b[i]);
                assert_eq!(a[i], c[i]);
            } else {
                assert_ne!(a[i], b[i]);
            }
        }
    }

    #[test]
    fn unknown_step_or_identity_is_key_error() {
        let mut s = store(2);
        s.init_domain_prompts(0, 2, 0).unwrap();
        assert!(matches!(s.compose(1, 0), Err(Error::Key(_))));
        assert!(matches!(s.compose(0, 2), Err(Error::Key(_))));
    }

    #[test]
    fn table_rows_match_individual_prompts() {
        let cfg = ModelConfig {
            prompt_tokens: 2,
            ..ModelConfig::default()
        };
        let mut enc =
            TextEncoder::new(&cfg, &mut rng_for(0, &[]), DType::F32, &Device::Cpu).unwrap();
        enc.freeze();
        let mut s = store(2);
        s.init_domain_prompts(0, 4, 0).unwrap();
        let table = text_table(&s, &enc, 0, PromptTracking::NONE).unwrap();
        assert_eq!(table.dims(), &[4, 32]);
        let again = text_table(&s, &enc, 0, PromptTracking::NONE).unwrap();
        assert_eq!(rows(&table), rows(&again));
        let row2 = enc
            .encode_prompt(&s.compose(0, 2).unwrap())
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for (a, b) in rows(&table)[2].iter().zip(&row2) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn logit_scale_is_clamped() {
        let s = StructuredPromptStore::new(1, 4, 0.001, DType::F64, &Device::Cpu).unwrap();
        s.clamp_logit_scale().unwrap();
        assert!((s.temperature().unwrap() - 0.01).abs() < 1e-9);
    }
}
