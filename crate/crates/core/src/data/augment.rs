//! Random view generation for the augmentation-contrastive pipeline.

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng_from;
use crate::error::Result;
use crate::kv::{KvReader, KvWriter};

/// Augmentation strengths. Setting every field to zero makes both views
/// equal to the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// 0 keeps the full frame; 1 samples crop areas down to 8% of the frame
    /// with aspect ratios in `[3/4, 4/3]`.
    pub crop: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 1.0,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop: 0.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn write_kv(&self, prefix: &str, w: &mut KvWriter) {
        let k = |name: &str| format!("{prefix}.{name}");
        w.put(&k("crop"), self.crop)
            .put(&k("flip_prob"), self.flip_prob)
            .put(&k("brightness"), self.brightness)
            .put(&k("contrast"), self.contrast)
            .put(&k("saturation"), self.saturation)
            .put(&k("grayscale_prob"), self.grayscale_prob);
    }

    pub fn read_kv(&mut self, prefix: &str, r: &mut KvReader) -> Result<()> {
        let k = |name: &str| format!("{prefix}.{name}");
        r.take(&k("crop"), &mut self.crop)?;
        r.take(&k("flip_prob"), &mut self.flip_prob)?;
        r.take(&k("brightness"), &mut self.brightness)?;
        r.take(&k("contrast"), &mut self.contrast)?;
        r.take(&k("saturation"), &mut self.saturation)?;
        r.take(&k("grayscale_prob"), &mut self.grayscale_prob)?;
        Ok(())
    }

    /// One random view of `x` (`H x W x C`, values in `[0, 1]`).
    pub fn view(&self, x: &Array3<f32>, rng: &mut impl Rng) -> Array3<f32> {
        let (h, w, _) = x.dim();
        let mut out = if self.crop > 0.0 {
            let area = rng.random_range((1.0 - 0.92 * self.crop.min(1.0))..=1.0);
            let log_ratio = (4.0f64 / 3.0).ln() * self.crop.min(1.0);
            let ratio = rng.random_range(-log_ratio..=log_ratio).exp();
            let ch = ((area / ratio).sqrt() * h as f64).clamp(1.0, h as f64);
            let cw = ((area * ratio).sqrt() * w as f64).clamp(1.0, w as f64);
            let y0 = rng.random_range(0.0..=(h as f64 - ch));
            let x0 = rng.random_range(0.0..=(w as f64 - cw));
            resize_crop(x, y0, x0, ch, cw)
        } else {
            x.clone()
        };
        if self.flip_prob > 0.0 && rng.random_bool(self.flip_prob.min(1.0)) {
            out.invert_axis(Axis(1));
            out = out.as_standard_layout().into_owned();
        }
        if self.brightness > 0.0 {
            let f = rng.random_range((1.0 - self.brightness)..=(1.0 + self.brightness)) as f32;
            out.mapv_inplace(|v| v * f);
        }
        if self.contrast > 0.0 {
            let f = rng.random_range((1.0 - self.contrast)..=(1.0 + self.contrast)) as f32;
            let mean = out.mean().unwrap_or(0.0);
            out.mapv_inplace(|v| (v - mean) * f + mean);
        }
        if self.saturation > 0.0 && out.dim().2 == 3 {
            let f = rng.random_range((1.0 - self.saturation)..=(1.0 + self.saturation)) as f32;
            let gray = luma(&out);
            ndarray::Zip::indexed(&mut out).for_each(|(i, j, _), v| {
                *v = (*v - gray[[i, j]]) * f + gray[[i, j]];
            });
        }
        if self.grayscale_prob > 0.0 && out.dim().2 == 3 && rng.random_bool(self.grayscale_prob.min(1.0)) {
            let gray = luma(&out);
            ndarray::Zip::indexed(&mut out).for_each(|(i, j, _), v| *v = gray[[i, j]]);
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

fn luma(x: &Array3<f32>) -> ndarray::Array2<f32> {
    let (h, w, _) = x.dim();
    ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * x[[i, j, 0]] + 0.587 * x[[i, j, 1]] + 0.114 * x[[i, j, 2]]
    })
}

/// Bilinear resample of the crop `[y0, y0+ch) x [x0, x0+cw)` back to the
/// input size.
fn resize_crop(x: &Array3<f32>, y0: f64, x0: f64, ch: f64, cw: f64) -> Array3<f32> {
    let (h, w, c) = x.dim();
    let sample = |pos: f64, size: usize| {
        let p = pos.clamp(0.0, (size - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(size - 1);
        (lo, hi, (p - lo as f64) as f32)
    };
    Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let sy = y0 + (i as f64 + 0.5) * ch / h as f64 - 0.5;
        let sx = x0 + (j as f64 + 0.5) * cw / w as f64 - 0.5;
        let (y_lo, y_hi, fy) = sample(sy, h);
        let (x_lo, x_hi, fx) = sample(sx, w);
        let top = x[[y_lo, x_lo, k]] * (1.0 - fx) + x[[y_lo, x_hi, k]] * fx;
        let bottom = x[[y_hi, x_lo, k]] * (1.0 - fx) + x[[y_hi, x_hi, k]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Two independent views of `x`, deterministic in `seed`.
pub fn augment_pair(x: &Array3<f32>, cfg: &AugmentConfig, seed: u64) -> (Array3<f32>, Array3<f32>) {
    let mut rng = rng_from(seed, 0x4155_4720);
    let a = cfg.view(x, &mut rng);
    let b = cfg.view(x, &mut rng);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Array3<f32> {
        Array3::from_shape_fn((8, 6, 3), |(i, j, k)| ((i * 13 + j * 7 + k * 3) % 17) as f32 / 16.0)
    }

    #[test]
    fn zero_strength_is_identity() {
        let x = image();
        let (a, b) = augment_pair(&x, &AugmentConfig::identity(), 5);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn seeded_and_shape_preserving() {
        let x = image();
        let cfg = AugmentConfig::default();
        let (a, b) = augment_pair(&x, &cfg, 11);
        assert_eq!(augment_pair(&x, &cfg, 11), (a.clone(), b.clone()));
        assert_eq!(a.dim(), x.dim());
        assert_eq!(b.dim(), x.dim());
        assert!(a.iter().chain(b.iter()).all(|v| (0.0..=1.0).contains(v)));
    }
}
