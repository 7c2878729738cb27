use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSource, Split};
use crate::encoders::image::images_to_tensor;
use crate::encoders::ImageEncoder;
use crate::error::Result;
use candle_core::{DType, Tensor};

/// Protocol-relevant labels of one feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub identity: usize,
    pub camera: usize,
    pub clothing_id: usize,
}

#[derive(Debug, Clone)]
pub struct ExtractedFeatures {
    /// Projected, unnormalized features, one row per record.
    pub features: Array2<f32>,
    pub meta: Vec<SampleMeta>,
    pub record_indices: Vec<usize>,
}

/// Projected features for the given records, in order, without autograd.
pub fn encode_records(
    encoder: &ImageEncoder,
    source: &ImageSource,
    indices: &[usize],
    batch: usize,
) -> Result<Tensor> {
    let ds = source.dataset();
    let (h, w) = (ds.image_height, ds.image_width);
    let mut chunks = Vec::new();
    for chunk in indices.chunks(batch.max(1)) {
        let pixels = source.pixels(chunk)?;
        let images =
            images_to_tensor(pixels, chunk.len(), h, w, encoder.dtype(), encoder.device())?;
        chunks.push(encoder.encode_images_inference(&images)?.feat);
    }
    if chunks.is_empty() {
        return Ok(Tensor::zeros(
            (0, encoder.projection().dims()[1]),
            encoder.dtype(),
            encoder.device(),
        )?);
    }
    Ok(Tensor::cat(&chunks, 0)?)
}

pub fn extract_features(
    encoder: &ImageEncoder,
    source: &ImageSource,
    split: Split,
    batch: usize,
) -> Result<ExtractedFeatures> {
    let ds = source.dataset();
    let indices = ds.split_indices(split);
    let feats = encode_records(encoder, source, &indices, batch)?;
    let d = feats.dims()[1];
    let flat = feats
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let features =
        Array2::from_shape_vec((indices.len(), d), flat).expect("feature buffer matches shape");
    let meta = indices
        .iter()
        .map(|&i| {
            let r = &ds.records[i];
            SampleMeta {
                identity: r.identity,
                camera: r.camera,
                clothing_id: r.clothing_id,
            }
        })
        .collect();
    Ok(ExtractedFeatures {
        features,
        meta,
        record_indices: indices,
    })
}
