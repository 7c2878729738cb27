//! Synthetic SC/CC domains.
//!
//! Each identity owns a fixed block pattern in the upper half of the image
//! ("body"); the lower half carries a coarser colour pattern ("clothing").
//! Cameras apply a global colour tint. Identity and clothing live in disjoint
//! regions, so a model that ignores the lower half is clothing-blind.

use std::f32::consts::TAU;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_domain_files, ClothingState, DomainDataset, SampleRecord, Split};
use crate::error::{Error, Result};

const BODY_ROWS: usize = 4;
const BODY_COLS: usize = 4;
const CLOTH_ROWS: usize = 2;
const CLOTH_COLS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub name: String,
    pub seed: u64,
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub clothing_state: ClothingState,
    pub num_cameras: usize,
    pub noise_std: f32,
    pub image_height: usize,
    pub image_width: usize,
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_identities must be >= 2, got {}",
                self.num_identities
            )));
        }
        if self.images_per_identity < 3 {
            // half to train, and at least one query plus one gallery image
            return Err(Error::InvalidArgument(format!(
                "images_per_identity must be >= 3 to fill train/query/gallery, got {}",
                self.images_per_identity
            )));
        }
        if self.num_cameras < 2 {
            return Err(Error::InvalidArgument(
                "num_cameras must be >= 2 for cross-camera gallery matches".into(),
            ));
        }
        if self.image_height < 2 * BODY_ROWS.max(CLOTH_ROWS)
            || self.image_width < BODY_COLS.max(CLOTH_COLS)
            || !self.image_height.is_multiple_of(2)
        {
            return Err(Error::InvalidArgument(format!(
                "image size {}x{} too small or odd height",
                self.image_height, self.image_width
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise_std must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-channel multiplicative tint for a camera.
pub fn camera_tint(camera: usize, num_cameras: usize) -> [f32; 3] {
    let phase = TAU * camera as f32 / num_cameras as f32;
    [0.0f32, 1.0, 2.0].map(|k| 1.0 + 0.25 * (phase + k * TAU / 3.0).cos())
}

type Pattern = Vec<[f32; 3]>;

fn draw_pattern(rng: &mut ChaCha8Rng, cells: usize) -> Pattern {
    (0..cells)
        .map(|_| {
            [
                rng.random::<f32>(),
                rng.random::<f32>(),
                rng.random::<f32>(),
            ]
        })
        .collect()
}

struct Canvas {
    height: usize,
    width: usize,
}

impl Canvas {
    fn render(
        &self,
        body: &Pattern,
        cloth: &Pattern,
        tint: [f32; 3],
        noise: &Normal<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Vec<u8> {
        let half = self.height / 2;
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let color = if y < half {
                    let r = y * BODY_ROWS / half;
                    let c = x * BODY_COLS / self.width;
                    body[r * BODY_COLS + c]
                } else {
                    let r = (y - half) * CLOTH_ROWS / half;
                    let c = x * CLOTH_COLS / self.width;
                    cloth[r * CLOTH_COLS + c]
                };
                for ch in 0..3 {
                    let v = color[ch] * tint[ch] + noise.sample(rng);
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

fn write_png(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(pixels)?;
    writer.finish()?;
    Ok(())
}

/// Generates a domain under `root` and returns it as if loaded from disk.
///
/// Output is a pure function of `params`: identical arguments produce
/// byte-identical manifests and images.
pub fn generate_synthetic_domain(
    params: &GeneratorParams,
    root: impl AsRef<Path>,
) -> Result<DomainDataset> {
    params.validate()?;
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0f32, params.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
    let canvas = Canvas {
        height: params.image_height,
        width: params.image_width,
    };

    let bodies: Vec<Pattern> = (0..params.num_identities)
        .map(|_| draw_pattern(&mut rng, BODY_ROWS * BODY_COLS))
        .collect();
    let outfits: Vec<Pattern> = (0..params.num_identities)
        .map(|_| draw_pattern(&mut rng, CLOTH_ROWS * CLOTH_COLS))
        .collect();

    let n = params.images_per_identity;
    let n_train = n / 2;
    let n_query = ((n - n_train) / 2).max(1);
    let mut records = Vec::with_capacity(params.num_identities * n);
    let mut next_clothing = 0usize;

    for identity in 0..params.num_identities {
        let base_camera = rng.random_range(0..params.num_cameras);
        for k in 0..n {
            let (split, camera) = if k < n_train {
                (Split::Train, rng.random_range(0..params.num_cameras))
            } else {
                // consecutive test images sit on consecutive cameras, so every
                // query has a gallery image from a different camera
                let j = k - n_train;
                let split = if j < n_query {
                    Split::Query
                } else {
                    Split::Gallery
                };
                (split, (base_camera + j) % params.num_cameras)
            };
            let (clothing_id, cloth) = match params.clothing_state {
                ClothingState::SC => (identity, outfits[identity].clone()),
                ClothingState::CC => {
                    let id = next_clothing;
                    next_clothing += 1;
                    (id, draw_pattern(&mut rng, CLOTH_ROWS * CLOTH_COLS))
                }
            };
            let tint = camera_tint(camera, params.num_cameras);
            let pixels = canvas.render(&bodies[identity], &cloth, tint, &noise, &mut rng);
            let image_path = format!("images/{identity:04}_{k:03}.png");
            write_png(
                &root.join(&image_path),
                params.image_height,
                params.image_width,
                &pixels,
            )?;
            records.push(SampleRecord {
                image_path,
                identity,
                camera,
                clothing_id,
                split,
            });
        }
    }

    let dataset = DomainDataset {
        name: params.name.clone(),
        clothing_state: params.clothing_state,
        num_identities: params.num_identities,
        records,
        image_height: params.image_height,
        image_width: params.image_width,
        root: root.to_path_buf(),
    };
    dataset.validate()?;
    write_domain_files(&dataset)?;
    Ok(dataset)
}
