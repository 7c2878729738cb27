//! Optional train-time transforms on HWC float images: horizontal flip,
//! zero pad + random crop, and random erasing. Off by default.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, sampled uniformly in this range.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            flip_prob: 0.5,
            pad: 2,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
        }
    }
}

impl AugmentConfig {
    pub fn apply(&self, image: &mut [f32], height: usize, width: usize, rng: &mut ChaCha8Rng) {
        if !self.enabled {
            return;
        }
        if rng.random_bool(self.flip_prob.clamp(0.0, 1.0)) {
            flip(image, height, width);
        }
        if self.pad > 0 {
            let dy = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
            let dx = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
            shift(image, height, width, dy, dx);
        }
        if rng.random_bool(self.erase_prob.clamp(0.0, 1.0)) {
            let area =
                rng.random_range(self.erase_area.0..=self.erase_area.1) * (height * width) as f64;
            let aspect: f64 = rng.random_range(0.3..3.3);
            let eh = ((area * aspect).sqrt() as usize).clamp(1, height);
            let ew = ((area / aspect).sqrt() as usize).clamp(1, width);
            let y0 = rng.random_range(0..=height - eh);
            let x0 = rng.random_range(0..=width - ew);
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    for c in 0..3 {
                        image[(y * width + x) * 3 + c] = rng.random();
                    }
                }
            }
        }
    }
}

fn flip(image: &mut [f32], height: usize, width: usize) {
    for y in 0..height {
        for x in 0..width / 2 {
            for c in 0..3 {
                image.swap((y * width + x) * 3 + c, (y * width + width - 1 - x) * 3 + c);
            }
        }
    }
}

/// Equivalent to zero padding followed by a crop offset by `(dy, dx)`.
fn shift(image: &mut [f32], height: usize, width: usize, dy: isize, dx: isize) {
    let src = image.to_vec();
    for y in 0..height as isize {
        for x in 0..width as isize {
            let (sy, sx) = (y + dy, x + dx);
            let inside = (0..height as isize).contains(&sy) && (0..width as isize).contains(&sx);
            for c in 0..3 {
                image[((y * width as isize + x) * 3) as usize + c] = if inside {
                    src[((sy * width as isize + sx) * 3) as usize + c]
                } else {
                    0.0
                };
            }
        }
    }
}
