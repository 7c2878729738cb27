use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::nn::{causal_mask, param, trunc_normal_var, Block, LayerNorm, NamedParams, INIT_STD};
use super::ModelConfig;
use crate::error::{Error, Result};

/// Fixed template vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateToken {
    Start,
    End,
    A,
    Photo,
    Of,
    Person,
    Period,
}

impl TemplateToken {
    pub const VOCAB: usize = 7;

    pub fn id(self) -> u32 {
        self as u32
    }
}

/// "[start] a photo of a"
pub const PREFIX: [TemplateToken; 5] = [
    TemplateToken::Start,
    TemplateToken::A,
    TemplateToken::Photo,
    TemplateToken::Of,
    TemplateToken::A,
];
/// "person . [end]"
pub const SUFFIX: [TemplateToken; 3] = [
    TemplateToken::Person,
    TemplateToken::Period,
    TemplateToken::End,
];

/// A prompt: fixed template words around 2M learnable slot vectors.
#[derive(Debug, Clone)]
pub struct PromptSequence {
    /// (2M, d_tok), interleaved as X_1, Y_1, ..., X_M, Y_M.
    pub slots: Tensor,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        PREFIX.len() + self.slots.dims().first().copied().unwrap_or(0) + SUFFIX.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Causal transformer over template embeddings and prompt slots, read out at
/// the end token and projected to the shared embedding width.
#[derive(Debug)]
pub struct TextEncoder {
    slot_count: usize,
    token_dim: usize,
    token_embedding: Var,
    position: Var,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Var,
    mask: Tensor,
    frozen: bool,
}

impl TextEncoder {
    pub fn new(
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let d = cfg.token_dim;
        Ok(Self {
            slot_count: 2 * cfg.prompt_tokens,
            token_dim: d,
            token_embedding: trunc_normal_var(
                rng,
                &[TemplateToken::VOCAB, d],
                INIT_STD,
                dtype,
                device,
            )?,
            position: trunc_normal_var(rng, &[cfg.prompt_len(), d], INIT_STD / 2.0, dtype, device)?,
            blocks: (0..cfg.text_depth)
                .map(|_| {
                    Block::new(
                        rng,
                        d,
                        cfg.text_heads,
                        cfg.mlp_ratio,
                        cfg.text_depth,
                        dtype,
                        device,
                    )
                })
                .collect::<Result<_>>()?,
            ln_final: LayerNorm::new(d, dtype, device)?,
            proj: trunc_normal_var(
                rng,
                &[d, cfg.embed_dim],
                (d as f64).powf(-0.5),
                dtype,
                device,
            )?,
            mask: causal_mask(cfg.prompt_len(), dtype, device)?,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn encode_prompt(&self, seq: &PromptSequence) -> Result<Tensor> {
        self.encode_slots(&seq.slots.unsqueeze(0)?)?
            .squeeze(0)
            .map_err(Into::into)
    }

    /// Encodes a batch of slot blocks (N, 2M, d_tok) into (N, d) text embeddings.
    pub fn encode_slots(&self, slots: &Tensor) -> Result<Tensor> {
        let track = !self.frozen;
        let dims = slots.dims();
        if dims.len() != 3 || dims[1] != self.slot_count || dims[2] != self.token_dim {
            return Err(Error::Shape(format!(
                "expected slots (N, {}, {}), got {dims:?}",
                self.slot_count, self.token_dim
            )));
        }
        let n = dims[0];
        let device = slots.device();
        let ids = |tokens: &[TemplateToken]| -> Result<Tensor> {
            let ids: Vec<u32> = tokens.iter().map(|t| t.id()).collect();
            let table = param(&self.token_embedding, track);
            let emb = table.index_select(&Tensor::new(ids.as_slice(), device)?, 0)?;
            Ok(emb.unsqueeze(0)?.repeat((n, 1, 1))?)
        };
        let prefix = ids(&PREFIX)?;
        let suffix = ids(&SUFFIX)?;
        let slots = slots.to_dtype(self.proj.dtype())?;
        let mut x = Tensor::cat(&[&prefix, &slots, &suffix], 1)?
            .broadcast_add(&param(&self.position, track))?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&self.mask), track)?;
        }
        let len = x.dim(1)?;
        let end = self
            .ln_final
            .forward(&x.narrow(1, len - 1, 1)?.squeeze(1)?, track)?;
        Ok(end.matmul(&param(&self.proj, track))?)
    }

    pub fn named_params(&self) -> NamedParams<'_> {
        let mut out: NamedParams<'_> = vec![
            ("text.token_embedding".into(), &self.token_embedding),
            ("text.position".into(), &self.position),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            block.named(&format!("text.blocks.{i}"), &mut out);
        }
        self.ln_final.named("text.ln_final", &mut out);
        out.push(("text.proj".into(), &self.proj));
        out
    }
}
