//! Seeded image augmentation.
//!
//! An [`AugmentPlan`] is drawn from a seed first and applied second, so the
//! record of what happened is available to callers and tests. Geometric steps
//! use nearest-neighbor resampling and are applied identically to the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{BinaryMask, Image, Raster};
use super::resize::resize_nearest;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Largest fraction cropped from each side.
    pub crop_max: f64,
    pub blur_p: f64,
    pub blur_sigma_max: f64,
    pub contrast: (f64, f64),
    pub noise_p: f64,
    pub noise_std_max: f64,
    pub brightness_p: f64,
    pub brightness: (f64, f64),
    pub scale: (f64, f64),
    /// Largest translation as a fraction of each dimension.
    pub translate: f64,
    pub rotate_deg: f64,
    pub shear_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            crop_max: 0.1,
            blur_p: 0.5,
            blur_sigma_max: 0.5,
            contrast: (0.75, 1.5),
            noise_p: 0.5,
            noise_std_max: 0.05,
            brightness_p: 0.2,
            brightness: (0.8, 1.2),
            scale: (0.8, 1.2),
            translate: 0.1,
            rotate_deg: 15.0,
            shear_deg: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    /// Translation as fractions of width and height.
    pub tx: f64,
    pub ty: f64,
    pub rotate_deg: f64,
    pub shear_deg: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
        rotate_deg: 0.0,
        shear_deg: 0.0,
    };
}

/// Concrete transform parameters; `None` marks a step that was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    /// Cropped fractions: left, top, right, bottom.
    pub crop: [f64; 4],
    pub blur_sigma: Option<f64>,
    pub contrast: Option<f64>,
    pub noise_std: Option<f64>,
    pub noise_seed: u64,
    pub brightness: Option<Vec<f64>>,
    pub affine: Affine,
}

impl AugmentPlan {
    /// Draws every parameter from `seed`. The number of draws does not depend
    /// on which steps fire, so each field has a stable stream position.
    pub fn sample(cfg: &AugmentConfig, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let hflip = uniform(0.0, 1.0) < cfg.hflip_p;
        let vflip = uniform(0.0, 1.0) < cfg.vflip_p;
        let crop = [(); 4].map(|_| uniform(0.0, cfg.crop_max));
        let blur_on = uniform(0.0, 1.0) < cfg.blur_p;
        let sigma = uniform(0.0, cfg.blur_sigma_max);
        let contrast = uniform(cfg.contrast.0, cfg.contrast.1);
        let noise_on = uniform(0.0, 1.0) < cfg.noise_p;
        let noise_std = uniform(0.0, cfg.noise_std_max);
        let noise_seed = (uniform(0.0, 1.0) * (1u64 << 53) as f64) as u64;
        let bright_on = uniform(0.0, 1.0) < cfg.brightness_p;
        let multipliers: Vec<f64> = (0..channels.max(1))
            .map(|_| uniform(cfg.brightness.0, cfg.brightness.1))
            .collect();
        let affine = Affine {
            scale: uniform(cfg.scale.0, cfg.scale.1),
            tx: uniform(-cfg.translate, cfg.translate),
            ty: uniform(-cfg.translate, cfg.translate),
            rotate_deg: uniform(-cfg.rotate_deg, cfg.rotate_deg),
            shear_deg: uniform(-cfg.shear_deg, cfg.shear_deg),
        };
        Self {
            hflip,
            vflip,
            crop,
            blur_sigma: blur_on.then_some(sigma),
            contrast: Some(contrast),
            noise_std: noise_on.then_some(noise_std),
            noise_seed,
            brightness: bright_on.then_some(multipliers),
            affine,
        }
    }

    /// The same plan with every photometric step removed.
    pub fn geometric_only(&self) -> Self {
        Self {
            blur_sigma: None,
            contrast: None,
            noise_std: None,
            brightness: None,
            ..self.clone()
        }
    }

    /// Applies the geometric steps to any raster.
    pub fn warp<T: Copy + Default>(&self, r: &Raster<T>) -> Raster<T> {
        let mut out = r.clone();
        if self.hflip {
            out = hflip(&out);
        }
        if self.vflip {
            out = vflip(&out);
        }
        out = crop_resize(&out, self.crop);
        affine_nearest(&out, &self.affine)
    }

    pub fn apply(&self, img: &Image, mask: Option<&BinaryMask>) -> Result<(Image, Option<BinaryMask>)> {
        if let Some(m) = mask {
            img.same_dims(m, "augment")?;
        }
        let mut out = self.warp(img);
        if let Some(sigma) = self.blur_sigma {
            out = gaussian_blur(&out, sigma);
        }
        if let Some(c) = self.contrast {
            for v in out.data_mut() {
                *v = 0.5 + c * (*v - 0.5);
            }
        }
        if let Some(std) = self.noise_std {
            if std > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
                let normal = Normal::new(0.0, std).expect("std is positive");
                for v in out.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        if let Some(mult) = &self.brightness {
            let ch = out.channels();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= mult[(i % ch).min(mult.len() - 1)];
            }
        }
        out.clamp_unit();
        let mask = mask.map(|m| self.warp(m).normalized());
        Ok((out, mask))
    }
}

/// Samples a plan from `seed` and applies it. Returns the plan as the record
/// of applied operations.
pub fn augment(
    img: &Image,
    mask: Option<&BinaryMask>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Image, Option<BinaryMask>, AugmentPlan)> {
    let plan = AugmentPlan::sample(cfg, img.channels(), seed);
    let (out, mask) = plan.apply(img, mask)?;
    Ok((out, mask, plan))
}

pub fn hflip<T: Copy>(r: &Raster<T>) -> Raster<T> {
    let w = r.width();
    Raster::from_fn(w, r.height(), r.channels(), |x, y, c| r.get(w - 1 - x, y, c))
}

pub fn vflip<T: Copy>(r: &Raster<T>) -> Raster<T> {
    let h = r.height();
    Raster::from_fn(r.width(), h, r.channels(), |x, y, c| r.get(x, h - 1 - y, c))
}

/// Removes the given side fractions, then scales back to the original size.
fn crop_resize<T: Copy>(r: &Raster<T>, frac: [f64; 4]) -> Raster<T> {
    let (w, h) = r.dims();
    if w == 0 || h == 0 {
        return r.clone();
    }
    let px = |f: f64, n: usize| (f * n as f64).floor() as usize;
    let (l, t) = (px(frac[0], w), px(frac[1], h));
    let (rt, b) = (px(frac[2], w), px(frac[3], h));
    let cw = w.saturating_sub(l + rt).max(1);
    let ch = h.saturating_sub(t + b).max(1);
    if (cw, ch) == (w, h) {
        return r.clone();
    }
    let cropped = r.crop(l.min(w - cw), t.min(h - ch), cw, ch).expect("window inside");
    resize_nearest(&cropped, w, h)
}

/// Affine warp about the image center with zero fill outside the source.
fn affine_nearest<T: Copy + Default>(r: &Raster<T>, a: &Affine) -> Raster<T> {
    if *a == Affine::IDENTITY {
        return r.clone();
    }
    let (w, h) = r.dims();
    let (theta, phi) = (a.rotate_deg.to_radians(), a.shear_deg.to_radians());
    let (sin, cos) = theta.sin_cos();
    let k = phi.tan();
    // Forward map: rotate · shear · scale.
    let m = [
        [cos * a.scale, (cos * k - sin) * a.scale],
        [sin * a.scale, (sin * k + cos) * a.scale],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (tx, ty) = (a.tx * w as f64, a.ty * h as f64);
    Raster::from_fn(w, h, r.channels(), |x, y, c| {
        let px = x as f64 + 0.5 - cx - tx;
        let py = y as f64 + 0.5 - cy - ty;
        let sx = inv[0][0] * px + inv[0][1] * py + cx;
        let sy = inv[1][0] * px + inv[1][1] * py + cy;
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            T::default()
        } else {
            r.get(sx as usize, sy as usize, c)
        }
    })
}

/// Separable Gaussian blur with clamped borders; tiny sigmas are a no-op.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 1e-6 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = img.dims();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tmp = Raster::from_fn(w, h, img.channels(), |x, y, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * img.get(at(x as isize + j as isize - radius, w), y, c))
            .sum::<f64>()
    });
    Raster::from_fn(w, h, img.channels(), |x, y, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * tmp.get(x, at(y as isize + j as isize - radius, h), c))
            .sum::<f64>()
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn test_image(w: usize, h: usize) -> Image {
        Raster::from_fn(w, h, 3, |x, y, c| ((x * 7 + y * 13 + c * 5) % 17) as f64 / 16.0)
    }

    fn test_mask(w: usize, h: usize) -> BinaryMask {
        Raster::from_fn(w, h, 1, |x, y, _| u8::from((x / 3 + y / 4) % 2 == 0))
    }

    #[test]
    fn seeded_output_is_bit_identical() {
        let (img, mask) = (test_image(24, 16), test_mask(24, 16));
        let cfg = AugmentConfig::default();
        let a = augment(&img, Some(&mask), &cfg, 99).unwrap();
        let b = augment(&img, Some(&mask), &cfg, 99).unwrap();
        assert_eq!(a.2, b.2);
        assert!(a.0.data().iter().zip(b.0.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn flips_are_involutions() {
        let img = test_image(7, 5);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn step_frequencies_and_ranges() {
        let cfg = AugmentConfig::default();
        let plans: Vec<_> = (0..1000).map(|s| AugmentPlan::sample(&cfg, 3, s)).collect();
        let blur = plans.iter().filter(|p| p.blur_sigma.is_some()).count();
        let bright = plans.iter().filter(|p| p.brightness.is_some()).count();
        assert!((450..=550).contains(&blur), "{blur}");
        assert!((150..=250).contains(&bright), "{bright}");
        for p in &plans {
            if let Some(s) = p.blur_sigma {
                assert!((0.0..=0.5).contains(&s));
            }
            let c = p.contrast.unwrap();
            assert!((0.75..=1.5).contains(&c));
            assert!(p.crop.iter().all(|f| (0.0..=0.1).contains(f)));
            assert!(p.affine.rotate_deg.abs() <= 15.0 && p.affine.shear_deg.abs() <= 8.0);
        }
    }

    #[test]
    fn photometric_steps_leave_mask_alone() {
        let (img, mask) = (test_image(12, 12), test_mask(12, 12));
        let plan = AugmentPlan {
            hflip: false,
            vflip: false,
            crop: [0.0; 4],
            blur_sigma: Some(0.4),
            contrast: Some(1.3),
            noise_std: Some(0.05),
            noise_seed: 3,
            brightness: Some(vec![1.1, 0.9, 1.0]),
            affine: Affine::IDENTITY,
        };
        let (out, m) = plan.apply(&img, Some(&mask)).unwrap();
        assert_eq!(m.unwrap(), mask);
        assert_ne!(out, img);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let plan = AugmentPlan::sample(&AugmentConfig::default(), 3, 0);
        assert!(plan.apply(&test_image(4, 4), Some(&test_mask(5, 4))).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Raster::filled(9, 9, 3, 0.4);
        let out = gaussian_blur(&img, 0.5);
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn pure_rotation_by_half_turn_matches_double_flip() {
        let img = test_image(8, 6);
        let a = Affine {
            rotate_deg: 180.0,
            ..Affine::IDENTITY
        };
        let rotated = affine_nearest(&img, &a);
        assert_eq!(rotated, hflip(&vflip(&img)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mask_stays_aligned_with_mask_as_image(seed: u64, w in 4usize..30, h in 4usize..30) {
            let mask = test_mask(w, h);
            let plan = AugmentPlan::sample(&AugmentConfig::default(), 1, seed);
            let (as_image, warped) = plan.geometric_only().apply(&mask.to_image(), Some(&mask)).unwrap();
            let warped = warped.unwrap();
            prop_assert!(warped.data().iter().all(|&v| v <= 1));
            prop_assert_eq!(as_image.map(|v| v as u8), warped);
        }
    }
}
