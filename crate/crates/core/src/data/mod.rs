//! Sample manifests and everything that turns them into training input.

mod augment;
mod labels;
mod manifest;
mod resample;
pub mod synth;

use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, CornerCrop};
pub use labels::{apex_index, regroup, ApexStrategy, LabelMap, Regrouped, FIVE_EMOTIONS};
pub use manifest::{load_manifest, MANIFEST_COLUMNS, QUADRANT_COLUMN};
pub use resample::{balance_indices, resample_balance};
pub use synth::{synth_dataset, SynthConfig};

/// Image quadrant carrying a synthetic class signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    /// `(x0, y0, x1, y1)` half-open bounds on an image of `width`×`height`.
    pub fn bounds(self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (hw, hh) = (width / 2, height / 2);
        match self {
            Quadrant::TopLeft => (0, 0, hw, hh),
            Quadrant::TopRight => (hw, 0, width, hh),
            Quadrant::BottomLeft => (0, hh, hw, height),
            Quadrant::BottomRight => (hw, hh, width, height),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top-left",
            Quadrant::TopRight => "top-right",
            Quadrant::BottomLeft => "bottom-left",
            Quadrant::BottomRight => "bottom-right",
        }
    }

    pub fn from_name(name: &str) -> Option<Quadrant> {
        Quadrant::ALL.into_iter().find(|q| q.name() == name)
    }

    pub fn contains(self, x: usize, y: usize, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.bounds(width, height);
        (x0..x1).contains(&x) && (y0..y1).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageSource {
    pub fn load(&self) -> Result<RgbImage> {
        match self {
            ImageSource::Memory(img) => Ok((**img).clone()),
            ImageSource::Path(path) => image::open(path)
                .map(|i| i.to_rgb8())
                .map_err(|e| Error::Image { path: path.clone(), message: e.to_string() }),
        }
    }
}

/// One apex image with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageSource,
    pub subject: String,
    pub database: String,
    pub label: String,
    pub apex: Option<usize>,
    pub clip_len: Option<usize>,
    /// Set by the synthetic generator; `None` for real data.
    pub signal_quadrant: Option<Quadrant>,
}

/// Ordered samples plus the class vocabulary their labels index into.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == label)
    }

    /// Class index of every sample.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                self.class_index(&s.label)
                    .ok_or_else(|| Error::input(format!("label `{}` is not one of {:?}", s.label, self.class_names)))
            })
            .collect()
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.class_names.len()];
        for l in self.labels()? {
            counts[l] += 1;
        }
        Ok(counts)
    }

    /// Distinct subject ids in lexicographic order.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.samples.iter().map(|s| s.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            notes: self.notes.clone(),
        }
    }

    /// Concatenates manifests that share a class vocabulary.
    pub fn pool(parts: &[Manifest]) -> Result<Manifest> {
        let first = parts.first().ok_or_else(|| Error::input("nothing to pool"))?;
        let mut out = Manifest { class_names: first.class_names.clone(), ..Default::default() };
        for m in parts {
            if m.class_names != out.class_names {
                return Err(Error::input(format!(
                    "cannot pool class sets {:?} and {:?}",
                    out.class_names, m.class_names
                )));
            }
            out.samples.extend(m.samples.iter().cloned());
            out.notes.extend(m.notes.iter().cloned());
        }
        Ok(out)
    }

    /// Opens every path-backed image, failing on the first unreadable one.
    pub fn validate_images(&self) -> Result<()> {
        for s in &self.samples {
            if let ImageSource::Path(_) = s.image {
                s.image.load()?;
            }
        }
        Ok(())
    }

    pub fn load_images(&self) -> Result<Vec<RgbImage>> {
        self.samples.iter().map(|s| s.image.load()).collect()
    }
}

/// `[1, 3, H, W]` tensor standardised to zero mean and unit variance over
/// all pixels and channels of the image. A constant image maps to zeros.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let n = raw.len() as f64;
    let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = raw.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = (px[c] as f64 - mean) * inv;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("image dimensions are non-zero")
}

/// Mixes several integers into one well-spread 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finaliser
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}
