//! Seeded photometric/geometric augmentation: flip, rotate, translate,
//! Gaussian noise, applied in that order and clamped to `[0, 1]`.
//! Geometric transforms fill uncovered pixels with zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Noise standard deviation on `[0, 1]` pixels.
    pub gaussian_sigma: f64,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub max_translate_px: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            gaussian_sigma: 0.02,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            max_translate_px: 2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every image untouched.
    pub fn none() -> Self {
        AugmentConfig {
            gaussian_sigma: 0.0,
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            max_translate_px: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            bail!(
                Config,
                "gaussian_sigma must be a nonnegative number, got {}",
                self.gaussian_sigma
            );
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            bail!(Config, "flip_prob must lie in [0, 1], got {}", self.flip_prob);
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            bail!(
                Config,
                "max_rotation_deg must be nonnegative, got {}",
                self.max_rotation_deg
            );
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.gaussian_sigma == 0.0
            && self.flip_prob == 0.0
            && self.max_rotation_deg == 0.0
            && self.max_translate_px == 0
    }
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("augmentation needs a [C,H,W] image, got {s:?}"),
    }
}

/// Applies the configured transforms, drawing randomness from `rng`.
/// A transform whose magnitude is zero is skipped and consumes no draws.
///
/// # Panics
/// If `img` is not `[C,H,W]`.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let mut out = img.clone();
    out.clear_grad();
    if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        out = flip_horizontal(&out);
    }
    if cfg.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        out = rotate(&out, deg.to_radians());
    }
    if cfg.max_translate_px > 0 {
        let t = cfg.max_translate_px as i64;
        let dx = rng.random_range(-t..=t);
        let dy = rng.random_range(-t..=t);
        out = translate(&out, dx, dy);
    }
    if cfg.gaussian_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.gaussian_sigma).expect("validated sigma");
        for v in out.data_mut() {
            *v += noise.sample(rng);
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (_, _, w) = dims(img);
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Rotates each channel by `radians` about the image center with bilinear
/// sampling. Positive angles turn clockwise as displayed (y pointing down).
pub fn rotate(img: &Tensor, radians: f64) -> Tensor {
    let (c, h, w) = dims(img);
    let (sin, cos) = radians.sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let at = |x: i64, y: i64| {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                // Inverse rotation maps the output pixel back into the source.
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x0 + 1, y0) * fx * (1.0 - fy)
                    + at(x0, y0 + 1) * (1.0 - fx) * fy
                    + at(x0 + 1, y0 + 1) * fx * fy;
                dst[ch * h * w + y * w + x] = v;
            }
        }
    }
    out
}

/// Shifts content by `(dx, dy)` pixels; positive moves right/down.
pub fn translate(img: &Tensor, dx: i64, dy: i64) -> Tensor {
    let (c, h, w) = dims(img);
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sx, sy) = (x - dx, y - dy);
                let v = if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    0.0
                } else {
                    src[ch * h * w + sy as usize * w + sx as usize]
                };
                dst[ch * h * w + y as usize * w + x as usize] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp() -> Tensor {
        Tensor::new(vec![1, 4, 6], (0..24).map(|i| i as f64 / 23.0).collect()).unwrap()
    }

    #[test]
    fn null_augmentation_is_identity() {
        let img = ramp();
        let out = augment(&img, &AugmentConfig::none(), &mut rng::stream(1, &[]));
        assert!(out.bitwise_eq(&img));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp();
        assert_ne!(flip_horizontal(&img), img);
        assert!(flip_horizontal(&flip_horizontal(&img)).bitwise_eq(&img));
    }

    #[test]
    fn zero_rotation_and_translation_are_identity() {
        let img = ramp();
        assert!(rotate(&img, 0.0).bitwise_eq(&img));
        assert!(translate(&img, 0, 0).bitwise_eq(&img));
    }

    #[test]
    fn quarter_turn_of_square() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = rotate(&img, std::f64::consts::FRAC_PI_2);
        let expected = [3.0, 1.0, 4.0, 2.0];
        for (a, b) in r.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", r.data());
        }
    }

    #[test]
    fn translate_fills_with_zero() {
        let img = Tensor::new(vec![1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(translate(&img, 1, 0).data(), &[0.0, 0.1, 0.2]);
        assert_eq!(translate(&img, -2, 0).data(), &[0.3, 0.0, 0.0]);
    }

    #[test]
    fn same_stream_same_output() {
        let img = ramp();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut rng::stream(9, &[1, 2]));
        let b = augment(&img, &cfg, &mut rng::stream(9, &[1, 2]));
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.shape(), img.shape());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn validate_rejects_bad_values() {
        let bad = AugmentConfig {
            flip_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            gaussian_sigma: -0.1,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
