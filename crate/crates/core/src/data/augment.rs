use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Crop one `target`×`target` corner out of a `source`×`source` image and
/// resize the result to `output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerCrop {
    pub source: u32,
    pub target: u32,
    pub output: (u32, u32),
}

impl CornerCrop {
    /// Same source/target ratio as 240→224, scaled to `size`.
    pub fn scaled(size: u32) -> Self {
        let target = ((size as f64) * 224.0 / 240.0).round() as u32;
        CornerCrop { source: size, target: target.max(1), output: (size, size) }
    }
}

/// Augmentations, each applied independently with probability `probability`
/// in the fixed order color shift, rotation, smoothing, corner crop.
/// `None` disables a step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub color_shift_max: Option<u8>,
    pub rotation_max_deg: Option<f64>,
    pub smooth_window_max: Option<u32>,
    pub corner_crop: Option<CornerCrop>,
    pub probability: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            color_shift_max: None,
            rotation_max_deg: None,
            smooth_window_max: None,
            corner_crop: None,
            probability: 0.5,
        }
    }

    /// Macro-expression pre-training: shift 20, rotation 10°, window 6.
    pub fn pretrain() -> Self {
        AugmentConfig {
            color_shift_max: Some(20),
            rotation_max_deg: Some(10.0),
            smooth_window_max: Some(6),
            ..Self::none()
        }
    }

    /// Holdout-database runs: shift 20, rotation 8°.
    pub fn hde() -> Self {
        AugmentConfig { color_shift_max: Some(20), rotation_max_deg: Some(8.0), ..Self::none() }
    }

    /// Composite-database runs: four-corner cropping of 240×240 masters.
    pub fn cde(output: (u32, u32)) -> Self {
        AugmentConfig { corner_crop: Some(CornerCrop { source: 240, target: 224, output }), ..Self::none() }
    }

    /// Per-database LOSO: every augmentation above.
    pub fn loso(output: (u32, u32)) -> Self {
        AugmentConfig {
            color_shift_max: Some(20),
            rotation_max_deg: Some(8.0),
            smooth_window_max: Some(6),
            corner_crop: Some(CornerCrop { source: 240, target: 224, output }),
            probability: 0.5,
        }
    }

    /// Rescales the corner crop to images of `size`×`size`.
    pub fn for_image_size(mut self, size: u32) -> Self {
        if let Some(c) = &mut self.corner_crop {
            *c = CornerCrop { output: c.output, ..CornerCrop::scaled(size) };
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config(format!("augmentation probability {} outside [0, 1]", self.probability)));
        }
        if self.rotation_max_deg.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::config("rotation maximum must be non-negative"));
        }
        if self.smooth_window_max.is_some_and(|w| w < 2) {
            return Err(Error::config("smoothing window maximum must be at least 2"));
        }
        if let Some(c) = self.corner_crop {
            if c.target == 0 || c.target > c.source || c.output.0 == 0 || c.output.1 == 0 {
                return Err(Error::config(format!("invalid corner crop {c:?}")));
            }
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(img: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> Result<RgbImage> {
    cfg.validate()?;
    if let Some(c) = cfg.corner_crop {
        if img.width() < c.source || img.height() < c.source {
            return Err(Error::input(format!(
                "corner crop needs at least {}x{}, image is {}x{}",
                c.source,
                c.source,
                img.width(),
                img.height()
            )));
        }
    }
    let mut out = img.clone();
    let p = cfg.probability;
    if let Some(max) = cfg.color_shift_max {
        if rng.gen::<f64>() < p {
            let max = max as i32;
            let shift: [i32; 3] = std::array::from_fn(|_| rng.gen_range(-max..=max));
            color_shift(&mut out, shift);
        }
    }
    if let Some(max) = cfg.rotation_max_deg {
        if rng.gen::<f64>() < p {
            let angle = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
            out = rotate(&out, angle);
        }
    }
    if let Some(max) = cfg.smooth_window_max {
        if rng.gen::<f64>() < p {
            let window = rng.gen_range(2..=max);
            out = box_smooth(&out, window);
        }
    }
    if let Some(c) = cfg.corner_crop {
        if rng.gen::<f64>() < p {
            let corner = rng.gen_range(0..4u32);
            out = corner_crop(&out, c.target, corner);
        }
        out = resize(&out, c.output);
    }
    Ok(out)
}

/// Adds a per-channel offset, saturating at 0 and 255.
pub fn color_shift(img: &mut RgbImage, shift: [i32; 3]) {
    for px in img.pixels_mut() {
        for (v, s) in px.0.iter_mut().zip(shift) {
            *v = (*v as i32 + s).clamp(0, 255) as u8;
        }
    }
}

fn clamp_pixel(img: &RgbImage, x: i64, y: i64) -> [f64; 3] {
    let x = x.clamp(0, img.width() as i64 - 1) as u32;
    let y = y.clamp(0, img.height() as i64 - 1) as u32;
    let p = img.get_pixel(x, y).0;
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Rotation about the image centre by `degrees`, bilinear sampling with
/// edge replication outside the source.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    RgbImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let p00 = clamp_pixel(img, x0, y0);
        let p10 = clamp_pixel(img, x0 + 1, y0);
        let p01 = clamp_pixel(img, x0, y0 + 1);
        let p11 = clamp_pixel(img, x0 + 1, y0 + 1);
        Rgb(std::array::from_fn(|c| {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
            (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
        }))
    })
}

/// Mean filter over a `window`×`window` box with edge replication. Even
/// windows extend one pixel further right/down than left/up.
pub fn box_smooth(img: &RgbImage, window: u32) -> RgbImage {
    let lo = -(((window - 1) / 2) as i64);
    let hi = lo + window as i64 - 1;
    let area = (window * window) as f64;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = [0.0; 3];
        for oy in lo..=hi {
            for ox in lo..=hi {
                let p = clamp_pixel(img, x as i64 + ox, y as i64 + oy);
                acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
            }
        }
        Rgb(acc.map(|a| (a / area).round() as u8))
    })
}

/// Corner 0..4 = top-left, top-right, bottom-left, bottom-right.
pub fn corner_crop(img: &RgbImage, size: u32, corner: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let x = if corner % 2 == 1 { w - size } else { 0 };
    let y = if corner >= 2 { h - size } else { 0 };
    imageops::crop_imm(img, x, y, size, size).to_image()
}

fn resize(img: &RgbImage, (w, h): (u32, u32)) -> RgbImage {
    if img.dimensions() == (w, h) {
        return img.clone();
    }
    imageops::resize(img, w, h, imageops::FilterType::Triangle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every `gen::<f64>()` from this source is just below 1.
    struct HighDraws;

    impl RngCore for HighDraws {
        fn next_u32(&mut self) -> u32 {
            u32::MAX
        }
        fn next_u64(&mut self) -> u64 {
            u64::MAX
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0xff);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            dest.fill(0xff);
            Ok(())
        }
    }

    fn textured(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn high_draws_skip_everything() {
        let img = textured(12, 10, 1);
        let cfg = AugmentConfig::pretrain();
        assert_eq!(augment(&img, &cfg, &mut HighDraws).unwrap(), img);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = textured(9, 7, 2);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn quarter_turn_on_square_is_exactish() {
        let img = textured(5, 5, 3);
        let r = rotate(&img, 90.0);
        // sin/cos(90°) are within 1e-16 of 0/1, so rounding recovers exact pixels
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(r.get_pixel(x, y), img.get_pixel(y, 4 - x));
            }
        }
    }

    #[test]
    fn color_shift_saturates() {
        let mut img = RgbImage::from_pixel(2, 2, Rgb([255, 0, 100]));
        color_shift(&mut img, [20, -20, 20]);
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 120]);
    }

    #[test]
    fn smoothing_constant_is_constant_and_window_two_anchors_top_left() {
        let img = RgbImage::from_pixel(4, 4, Rgb([7, 8, 9]));
        assert_eq!(box_smooth(&img, 5), img);
        let mut img = RgbImage::from_pixel(3, 3, Rgb([0, 0, 0]));
        img.put_pixel(1, 1, Rgb([200, 200, 200]));
        let s = box_smooth(&img, 2);
        assert_eq!(s.get_pixel(0, 0).0, [50, 50, 50]);
        assert_eq!(s.get_pixel(1, 1).0, [50, 50, 50]);
        assert_eq!(s.get_pixel(2, 2).0, [0, 0, 0]);
    }

    #[test]
    fn corner_crop_sizes_and_errors() {
        let img = textured(20, 20, 4);
        let crop = CornerCrop { source: 20, target: 16, output: (8, 8) };
        let cfg = AugmentConfig { corner_crop: Some(crop), probability: 1.0, ..AugmentConfig::none() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(augment(&img, &cfg, &mut rng).unwrap().dimensions(), (8, 8));
        // skipped crops still emit the output size
        let cfg0 = AugmentConfig { probability: 0.0, ..cfg };
        assert_eq!(augment(&img, &cfg0, &mut rng).unwrap().dimensions(), (8, 8));
        let small = textured(10, 10, 6);
        assert!(matches!(augment(&small, &cfg, &mut rng), Err(Error::Input(_))));

        let br = corner_crop(&img, 16, 3);
        assert_eq!(br.get_pixel(0, 0), img.get_pixel(4, 4));
    }

    #[test]
    fn augmentation_preserves_size_and_is_reproducible() {
        let img = textured(16, 16, 7);
        let cfg = AugmentConfig { probability: 1.0, ..AugmentConfig::pretrain() };
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (16, 16));
        assert_ne!(a, img);
    }

    #[test]
    fn presets_match_settings() {
        assert_eq!(AugmentConfig::pretrain().rotation_max_deg, Some(10.0));
        assert_eq!(AugmentConfig::hde().rotation_max_deg, Some(8.0));
        assert_eq!(AugmentConfig::hde().color_shift_max, Some(20));
        assert_eq!(AugmentConfig::pretrain().smooth_window_max, Some(6));
        let c = AugmentConfig::cde((224, 224)).corner_crop.unwrap();
        assert_eq!((c.source, c.target), (240, 224));
        assert_eq!(CornerCrop::scaled(32).target, 30);
    }
}
