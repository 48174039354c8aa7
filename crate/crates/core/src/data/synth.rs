//! Synthetic stand-in for a micro-expression database.
//!
//! Every image is a subject-specific sinusoidal texture. A class adds one
//! elongated, tinted Gaussian blob with a class-specific orientation,
//! confined to a class-specific quadrant. Subjects change only the texture,
//! so a subject-independent classifier has to look at the quadrant.

use std::f64::consts::PI;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, ImageSource, Manifest, Quadrant, Sample, FIVE_EMOTIONS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_subjects: usize,
    /// Samples per (subject, class) pair.
    pub per_subject: usize,
    pub image_size: u32,
    pub seed: u64,
    pub database: String,
}

impl SynthConfig {
    pub fn new(n_classes: usize, n_subjects: usize, per_subject: usize, image_size: u32, seed: u64) -> Self {
        SynthConfig { n_classes, n_subjects, per_subject, image_size, seed, database: "synth".into() }
    }
}

const TINTS: [[f64; 3]; 6] = [
    [1.0, 0.35, 0.2],
    [0.2, 1.0, 0.35],
    [0.35, 0.2, 1.0],
    [1.0, 1.0, 0.2],
    [0.2, 1.0, 1.0],
    [1.0, 0.2, 1.0],
];

pub fn class_names(n_classes: usize) -> Vec<String> {
    if n_classes <= FIVE_EMOTIONS.len() {
        FIVE_EMOTIONS[..n_classes].iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_classes).map(|k| format!("class{k}")).collect()
    }
}

pub fn quadrant_for_class(class: usize) -> Quadrant {
    Quadrant::ALL[class % 4]
}

struct Texture {
    freq: (f64, f64),
    phase: f64,
    amplitude: f64,
    offset: [f64; 3],
}

impl Texture {
    fn for_subject(seed: u64, subject: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x7e87, subject as u64]));
        let brightness = rng.gen_range(-12.0..12.0);
        Texture {
            freq: (rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0)),
            phase: rng.gen_range(0.0..2.0 * PI),
            amplitude: rng.gen_range(8.0..16.0),
            offset: std::array::from_fn(|_| brightness + rng.gen_range(-8.0..8.0)),
        }
    }
}

fn render(size: u32, texture: &Texture, class: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let quadrant = quadrant_for_class(class);
    let (x0, y0, x1, y1) = quadrant.bounds(size as usize, size as usize);
    let jitter = s / 16.0;
    let cx = (x0 + x1) as f64 / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
    let cy = (y0 + y1) as f64 / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
    let theta = class as f64 * PI / n_classes as f64 + rng.gen_range(-8f64..8.0).to_radians();
    let (sin, cos) = theta.sin_cos();
    let sigma_major = s / 6.0;
    let sigma_minor = (s / 14.0).max(0.9);
    let amplitude = rng.gen_range(80.0..110.0);
    let tint = TINTS[class % TINTS.len()];

    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let wave = texture.amplitude * (2.0 * PI * (texture.freq.0 * fx + texture.freq.1 * fy) / s + texture.phase).sin();
            let blob = if quadrant.contains(x as usize, y as usize, size as usize, size as usize) {
                let (dx, dy) = (fx - cx, fy - cy);
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                amplitude * (-(u * u) / (2.0 * sigma_major * sigma_major) - (v * v) / (2.0 * sigma_minor * sigma_minor)).exp()
            } else {
                0.0
            };
            let px = std::array::from_fn(|c| {
                let noise = rng.gen_range(-5.0..5.0);
                (128.0 + texture.offset[c] + wave + blob * tint[c] + noise).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// In-memory manifest of `n_classes * n_subjects * per_subject` samples,
/// ordered by subject, then class, then repetition.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Manifest> {
    if cfg.n_classes == 0 || cfg.n_subjects == 0 || cfg.per_subject == 0 || cfg.image_size < 4 {
        return Err(Error::config(format!("synthetic dataset needs positive counts and size >= 4: {cfg:?}")));
    }
    let names = class_names(cfg.n_classes);
    let width = cfg.n_subjects.to_string().len().max(2);
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.n_subjects * cfg.per_subject);
    for subject in 0..cfg.n_subjects {
        let texture = Texture::for_subject(cfg.seed, subject);
        for (class, name) in names.iter().enumerate() {
            for rep in 0..cfg.per_subject {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, subject as u64, class as u64, rep as u64]));
                let img = render(cfg.image_size, &texture, class, cfg.n_classes, &mut rng);
                samples.push(Sample {
                    image: ImageSource::Memory(Arc::new(img)),
                    subject: format!("s{:0width$}", subject + 1),
                    database: cfg.database.clone(),
                    label: name.clone(),
                    apex: None,
                    clip_len: None,
                    signal_quadrant: Some(quadrant_for_class(class)),
                });
            }
        }
    }
    Ok(Manifest {
        samples,
        class_names: names,
        notes: vec![format!(
            "synthetic: {} classes, {} subjects, {} per subject and class, {}px, seed {}",
            cfg.n_classes, cfg.n_subjects, cfg.per_subject, cfg.image_size, cfg.seed
        )],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(m: &Manifest) -> Vec<Vec<u8>> {
        m.load_images().unwrap().into_iter().map(|i| i.into_raw()).collect()
    }

    #[test]
    fn counts_and_fields() {
        let m = synth_dataset(&SynthConfig::new(5, 6, 4, 16, 1)).unwrap();
        assert_eq!(m.len(), 120);
        assert_eq!(m.subjects().len(), 6);
        assert_eq!(m.class_counts().unwrap(), [24; 5]);
        assert!(m.samples.iter().all(|s| !s.subject.is_empty() && s.signal_quadrant.is_some()));
    }

    #[test]
    fn same_seed_same_pixels() {
        let cfg = SynthConfig::new(3, 2, 2, 16, 9);
        assert_eq!(pixels(&synth_dataset(&cfg).unwrap()), pixels(&synth_dataset(&cfg).unwrap()));
        let other = SynthConfig { seed: 10, ..cfg };
        assert_ne!(pixels(&synth_dataset(&other).unwrap()), pixels(&synth_dataset(&SynthConfig::new(3, 2, 2, 16, 9)).unwrap()));
    }

    #[test]
    fn class_means_differ_only_in_their_quadrants() {
        let size = 32usize;
        let n = 5;
        let m = synth_dataset(&SynthConfig::new(n, 6, 4, size as u32, 3)).unwrap();
        let labels = m.labels().unwrap();
        let images = pixels(&m);
        // per-class mean of every channel value
        let mut means = vec![vec![0.0; 3 * size * size]; n];
        let mut counts = vec![0usize; n];
        for (img, &l) in images.iter().zip(&labels) {
            counts[l] += 1;
            means[l].iter_mut().zip(img).for_each(|(m, &v)| *m += v as f64);
        }
        for (mean, &c) in means.iter_mut().zip(&counts) {
            mean.iter_mut().for_each(|v| *v /= c as f64);
        }
        // mean difference of two 24-sample averages of U(-5, 5) noise
        let noise_sigma = (2.0 * 100.0 / 12.0 / counts[0] as f64).sqrt();
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let (qa, qb) = (quadrant_for_class(a), quadrant_for_class(b));
                let mut outside = 0.0f64;
                let mut inside = 0.0f64;
                for y in 0..size {
                    for x in 0..size {
                        let p = 3 * (y * size + x);
                        let d = (0..3).map(|c| (means[a][p + c] - means[b][p + c]).abs()).fold(0.0, f64::max);
                        if qa.contains(x, y, size, size) {
                            inside = inside.max(d);
                        } else if !qb.contains(x, y, size, size) {
                            outside = outside.max(d);
                        }
                    }
                }
                assert!(outside < 6.0 * noise_sigma, "classes {a}/{b} differ by {outside} outside their quadrants");
                assert!(inside > 20.0, "classes {a}/{b} differ by only {inside} inside quadrant of {a}");
            }
        }
    }
}
