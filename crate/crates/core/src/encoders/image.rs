use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::nn::{param, trunc_normal_var, Block, LayerNorm, NamedParams};
use super::ModelConfig;
use crate::error::{Error, Result};

/// Per-channel input normalization, CLIP's published constants.
pub const PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// Output of the image encoder for a batch.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// Class token after the final layer norm, before projection: (B, pre_dim).
    pub pre: Tensor,
    /// `pre` times the projection matrix: (B, embed_dim).
    pub feat: Tensor,
}

/// Patch-embedding ViT with a class-token readout and a linear projection.
#[derive(Debug)]
pub struct ImageEncoder {
    height: usize,
    width: usize,
    patch: usize,
    patch_embed: Var,
    class_token: Var,
    position: Var,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Var,
    frozen: bool,
}

impl ImageEncoder {
    pub fn new(
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let w = cfg.vision_width;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let scale = (w as f64).powf(-0.5);
        Ok(Self {
            height: cfg.image_height,
            width: cfg.image_width,
            patch: cfg.patch_size,
            patch_embed: trunc_normal_var(
                rng,
                &[patch_dim, w],
                (patch_dim as f64).powf(-0.5),
                dtype,
                device,
            )?,
            class_token: trunc_normal_var(rng, &[w], scale, dtype, device)?,
            position: trunc_normal_var(rng, &[cfg.num_patches() + 1, w], scale, dtype, device)?,
            ln_pre: LayerNorm::new(w, dtype, device)?,
            blocks: (0..cfg.vision_depth)
                .map(|_| {
                    Block::new(
                        rng,
                        w,
                        cfg.vision_heads,
                        cfg.mlp_ratio,
                        cfg.vision_depth,
                        dtype,
                        device,
                    )
                })
                .collect::<Result<_>>()?,
            ln_post: LayerNorm::new(w, dtype, device)?,
            proj: trunc_normal_var(rng, &[w, cfg.embed_dim], scale, dtype, device)?,
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

    pub fn projection(&self) -> &Var {
        &self.proj
    }

    pub fn dtype(&self) -> DType {
        self.proj.dtype()
    }

    pub fn device(&self) -> &Device {
        self.proj.device()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Encodes a (B, H, W, 3) batch with values in [0, 1].
    pub fn encode_images(&self, batch: &Tensor) -> Result<ImageFeatures> {
        self.forward(batch, !self.frozen)
    }

    /// Same as [`encode_images`](Self::encode_images) without building a graph.
    pub fn encode_images_inference(&self, batch: &Tensor) -> Result<ImageFeatures> {
        self.forward(batch, false)
    }

    fn forward(&self, batch: &Tensor, track: bool) -> Result<ImageFeatures> {
        let dims = batch.dims();
        if dims.len() != 4 || dims[1] != self.height || dims[2] != self.width || dims[3] != 3 {
            return Err(Error::Shape(format!(
                "expected (B, {}, {}, 3), got {dims:?}",
                self.height, self.width
            )));
        }
        let b = dims[0];
        if b == 0 {
            return Err(Error::Shape("empty image batch".into()));
        }
        let p = self.patch;
        let (gh, gw) = (self.height / p, self.width / p);
        let mean = Tensor::new(&PIXEL_MEAN, batch.device())?.to_dtype(self.proj.dtype())?;
        let std = Tensor::new(&PIXEL_STD, batch.device())?.to_dtype(self.proj.dtype())?;
        let patches = batch
            .to_dtype(self.proj.dtype())?
            .broadcast_sub(&mean)?
            .broadcast_div(&std)?
            .reshape((b, gh, p, gw, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, gh * gw, p * p * 3))?;
        let tokens = patches.broadcast_matmul(&param(&self.patch_embed, track))?;
        let w = tokens.dim(2)?;
        let cls = param(&self.class_token, track)
            .reshape((1, 1, w))?
            .repeat((b, 1, 1))?;
        let mut x =
            Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&param(&self.position, track))?;
        x = self.ln_pre.forward(&x, track)?;
        for block in &self.blocks {
            x = block.forward(&x, None, track)?;
        }
        let pre = self
            .ln_post
            .forward(&x.narrow(1, 0, 1)?.squeeze(1)?, track)?;
        let feat = pre.matmul(&param(&self.proj, track))?;
        Ok(ImageFeatures { pre, feat })
    }

    pub fn named_params(&self) -> NamedParams<'_> {
        let mut out: NamedParams<'_> = vec![
            ("image.patch_embed".into(), &self.patch_embed),
            ("image.class_token".into(), &self.class_token),
            ("image.position".into(), &self.position),
        ];
        self.ln_pre.named("image.ln_pre", &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.named(&format!("image.blocks.{i}"), &mut out);
        }
        self.ln_post.named("image.ln_post", &mut out);
        out.push(("image.proj".into(), &self.proj));
        out
    }
}

/// Packs HWC pixel buffers into a (B, H, W, 3) tensor.
pub fn images_to_tensor(
    pixels: Vec<f32>,
    batch: usize,
    height: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if pixels.len() != batch * height * width * 3 {
        return Err(Error::Shape(format!(
            "{} pixels for {batch} images of {height}x{width}",
            pixels.len()
        )));
    }
    Ok(Tensor::from_vec(pixels, (batch, height, width, 3), device)?.to_dtype(dtype)?)
}
