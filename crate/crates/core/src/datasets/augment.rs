use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageTensor;

/// Which hand-crafted augmentations to apply, and how strongly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
    pub flip_probability: f64,
    /// Lower bound of the retained area fraction for random crops.
    pub min_crop_area: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 ± strength`.
    pub jitter_strength: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { flip: true, crop: true, jitter: true, flip_probability: 0.5, min_crop_area: 0.5, jitter_strength: 0.2 }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self { flip: false, crop: false, jitter: false, ..Self::default() }
    }

    pub fn is_identity(&self) -> bool {
        !(self.flip || self.crop || self.jitter)
    }
}

/// Multiplicative colour jitter factors (1.0 is the identity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl ColorJitter {
    /// Brightness scales values; contrast blends with the mean grey level;
    /// saturation blends with the per-pixel luma. Output is clamped to [0, 1].
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let (c, h, w) = (img.channels(), img.height(), img.width());
        let plane = h * w;
        let mut data: Vec<f32> = img.data().iter().map(|v| (v * self.brightness).clamp(0.0, 1.0)).collect();
        if c == 3 {
            let luma = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
            let mean_grey = (0..plane).map(|i| luma(&data, i)).sum::<f32>() / plane as f32;
            for v in &mut data {
                *v = (mean_grey + self.contrast * (*v - mean_grey)).clamp(0.0, 1.0);
            }
            for i in 0..plane {
                let g = luma(&data, i);
                for ch in 0..3 {
                    let v = &mut data[ch * plane + i];
                    *v = (g + self.saturation * (*v - g)).clamp(0.0, 1.0);
                }
            }
        } else {
            let mean = data.iter().sum::<f32>() / data.len() as f32;
            for v in &mut data {
                *v = (mean + self.contrast * (*v - mean)).clamp(0.0, 1.0);
            }
        }
        ImageTensor::from_clamped(c, h, w, data).expect("shape preserved")
    }
}

pub(crate) fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut data = Vec::with_capacity(img.data().len());
    for row in img.data().chunks(w) {
        data.extend(row.iter().rev());
    }
    debug_assert_eq!(data.len(), c * h * w);
    ImageTensor::from_clamped(c, h, w, data).expect("shape preserved")
}

/// Bilinear resize of the window `[y0, y0+ch) x [x0, x0+cw)` back to full size.
fn crop_resize(img: &ImageTensor, y0: f32, x0: f32, ch: f32, cw: f32) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        let sy = (y0 + (y as f32 + 0.5) * ch / h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let (ya, fy) = (sy.floor() as usize, sy.fract());
        let yb = (ya + 1).min(h - 1);
        for x in 0..w {
            let sx = (x0 + (x as f32 + 0.5) * cw / w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
            let (xa, fx) = (sx.floor() as usize, sx.fract());
            let xb = (xa + 1).min(w - 1);
            for ch_i in 0..c {
                let top = img.get(ch_i, ya, xa) * (1.0 - fx) + img.get(ch_i, ya, xb) * fx;
                let bot = img.get(ch_i, yb, xa) * (1.0 - fx) + img.get(ch_i, yb, xb) * fx;
                data[(ch_i * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    ImageTensor::from_clamped(c, h, w, data).expect("shape preserved")
}

/// Applies the enabled augmentations in the order flip, crop, jitter.
pub fn augment<R: Rng + ?Sized>(img: &ImageTensor, rng: &mut R, policy: &AugmentPolicy) -> ImageTensor {
    let mut out = img.clone();
    if policy.flip && rng.random_bool(policy.flip_probability.clamp(0.0, 1.0)) {
        out = flip_horizontal(&out);
    }
    if policy.crop {
        let lo = policy.min_crop_area.clamp(0.5, 1.0);
        let area: f64 = if lo < 1.0 { rng.random_range(lo..=1.0) } else { 1.0 };
        let side = area.sqrt() as f32;
        let (h, w) = (out.height() as f32, out.width() as f32);
        let (ch, cw) = (h * side, w * side);
        let y0 = rng.random_range(0.0..=(h - ch).max(0.0));
        let x0 = rng.random_range(0.0..=(w - cw).max(0.0));
        out = crop_resize(&out, y0, x0, ch, cw);
    }
    if policy.jitter {
        let s = policy.jitter_strength.clamp(0.0, 1.0) as f32;
        let mut factor = || if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
        let jitter = ColorJitter { brightness: factor(), contrast: factor(), saturation: factor() };
        out = jitter.apply(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image() -> ImageTensor {
        let data = (0..3 * 4 * 5).map(|i| i as f32 / 60.0).collect();
        ImageTensor::new(3, 4, 5, data).unwrap()
    }

    #[test]
    fn empty_policy_is_identity() {
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &mut rng, &AugmentPolicy::none()), img);
    }

    #[test]
    fn forced_flip_mirrors_rows_and_is_an_involution() {
        let img = gradient_image();
        let policy =
            AugmentPolicy { flip: true, crop: false, jitter: false, flip_probability: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&img, &mut rng, &policy);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(once.get(c, y, x), img.get(c, y, 4 - x));
                }
            }
        }
        assert_eq!(augment(&once, &mut rng, &policy), img);
    }

    #[test]
    fn brightening_a_bright_image_clamps_at_one() {
        let img = ImageTensor::filled(3, 4, 4, 0.9).unwrap();
        let out = ColorJitter { brightness: 1.2, contrast: 1.0, saturation: 1.0 }.apply(&img);
        assert!(out.data().iter().all(|&v| v <= 1.0));
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn full_policy_preserves_shape_and_range() {
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment(&img, &mut rng, &AugmentPolicy::default());
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
