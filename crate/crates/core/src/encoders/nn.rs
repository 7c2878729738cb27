//! Minimal transformer pieces over candle tensors.
//!
//! Every forward takes a `track` flag: when false, parameters enter the graph
//! detached, so frozen groups never receive gradients.

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng::truncated_normal;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Named view of a module's parameters, in a stable order.
pub type NamedParams<'a> = Vec<(String, &'a Var)>;

pub(crate) fn param(v: &Var, track: bool) -> Tensor {
    if track {
        v.as_tensor().clone()
    } else {
        v.as_tensor().detach()
    }
}

pub fn trunc_normal_var(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Var> {
    let len = shape.iter().product();
    let values = truncated_normal(rng, len, std);
    let t = Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?;
    Ok(Var::from_tensor(&t)?)
}

fn filled_var(shape: &[usize], value: f64, dtype: DType, device: &Device) -> Result<Var> {
    let t = (Tensor::ones(shape, dtype, device)? * value)?;
    Ok(Var::from_tensor(&t)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise L2 normalization of a 2-D tensor.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        rng: &mut ChaCha8Rng,
        (input, output): (usize, usize),
        std: f64,
        bias: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let weight = trunc_normal_var(rng, &[input, output], std, dtype, device)?;
        let bias = if bias {
            Some(filled_var(&[output], 0.0, dtype, device)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        let y = x.broadcast_matmul(&param(&self.weight, track))?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&param(b, track))?,
            None => y,
        })
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(width: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            gamma: filled_var(&[width], 1.0, dtype, device)?,
            beta: filled_var(&[width], 0.0, dtype, device)?,
        })
    }

    pub fn forward(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&param(&self.gamma, track))?
            .broadcast_add(&param(&self.beta, track))?)
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
}

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP.
///
/// Weights use CLIP's scales: `width^-1/2` into attention, `(2 width)^-1/2`
/// into the MLP, and residual outputs further shrunk by `(2 depth)^-1/2` so a
/// deep random stack stays near identity without collapsing to it.
#[derive(Debug)]
pub struct Block {
    heads: usize,
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(
        rng: &mut ChaCha8Rng,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let attn_std = (width as f64).powf(-0.5);
        let residual_std = attn_std * (2.0 * depth.max(1) as f64).powf(-0.5);
        let fc_std = (2.0 * width as f64).powf(-0.5);
        let hidden = mlp_ratio * width;
        Ok(Self {
            heads,
            ln1: LayerNorm::new(width, dtype, device)?,
            qkv: Linear::new(rng, (width, 3 * width), attn_std, true, dtype, device)?,
            out: Linear::new(rng, (width, width), residual_std, true, dtype, device)?,
            ln2: LayerNorm::new(width, dtype, device)?,
            fc1: Linear::new(rng, (width, hidden), fc_std, true, dtype, device)?,
            fc2: Linear::new(rng, (hidden, width), residual_std, true, dtype, device)?,
        })
    }

    /// `x`: (B, T, W). `mask`: optional additive (T, T) attention mask.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, track: bool) -> Result<Tensor> {
        let (b, t, w) = x.dims3()?;
        let head_dim = w / self.heads;
        let h = self.ln1.forward(x, track)?;
        let qkv = self
            .qkv
            .forward(&h, track)?
            .reshape((b, t, 3, self.heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (head_dim as f64).sqrt()))?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.reshape((b, t, w))?;
        let x = (x + self.out.forward(&attn, track)?)?;
        let h = self.ln2.forward(&x, track)?;
        let h = self
            .fc2
            .forward(&self.fc1.forward(&h, track)?.gelu_erf()?, track)?;
        Ok((x + h)?)
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.ln1.named(&format!("{prefix}.ln1"), out);
        self.qkv.named(&format!("{prefix}.attn.qkv"), out);
        self.out.named(&format!("{prefix}.attn.out"), out);
        self.ln2.named(&format!("{prefix}.ln2"), out);
        self.fc1.named(&format!("{prefix}.mlp.fc1"), out);
        self.fc2.named(&format!("{prefix}.mlp.fc2"), out);
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative above.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f32> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (len, len), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn log_softmax_matches_direct_formula() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let got = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((got[0][2] - (3.0 - z.ln())).abs() < 1e-12);
        assert!((got[1][0] + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn block_preserves_shape_and_causal_prefix() {
        let dev = Device::Cpu;
        let mut rng = rng_for(0, &[]);
        let block = Block::new(&mut rng, 8, 2, 2, 1, DType::F64, &dev).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 8), &dev).unwrap();
        let mask = causal_mask(5, DType::F64, &dev).unwrap();
        let y = block.forward(&x, Some(&mask), false).unwrap();
        assert_eq!(y.dims(), &[2, 5, 8]);
        // with a causal mask, position 0 only depends on itself
        let y0 = block
            .forward(&x.narrow(1, 0, 1).unwrap(), None, false)
            .unwrap();
        let a = y
            .narrow(1, 0, 1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let b = y0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
