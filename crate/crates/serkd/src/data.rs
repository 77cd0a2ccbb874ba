//! Seeded synthetic image classes built from Gaussian blobs.

use serkd_core::rng::SeededRng;
use serkd_core::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub image_size: usize,
    pub blobs: usize,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Maximum per-sample shift of every blob centre, in pixels.
    pub jitter: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            classes: 4,
            train_per_class: 64,
            val_per_class: 32,
            image_size: 16,
            blobs: 3,
            blob_sigma: 1.5,
            jitter: 1.0,
            noise: 0.1,
        }
    }
}

impl DataSpec {
    /// Distance from the border a blob centre keeps.
    fn margin(&self) -> f64 {
        self.blob_sigma + self.jitter
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(HarnessError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.blobs == 0 {
            return Err(HarnessError::Config("sample and blob counts must be positive".into()));
        }
        if !(self.blob_sigma > 0.0) || !(self.jitter >= 0.0) || !(self.noise >= 0.0) {
            return Err(HarnessError::Config(format!(
                "blob sigma must be positive and jitter/noise non-negative ({}, {}, {})",
                self.blob_sigma, self.jitter, self.noise
            )));
        }
        let room = self.image_size as f64 - 1.0 - 2.0 * self.margin();
        if room <= 0.0 {
            return Err(HarnessError::Config(format!(
                "blobs of sigma {} with jitter {} fall off a {}-pixel canvas",
                self.blob_sigma, self.jitter, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    cy: f64,
    cx: f64,
    color: [f64; 3],
}

/// Images `(N, H, W, 3)` in row-major order with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub image_size: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    /// Gather the given samples into an image tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(&self.images[i * p..(i + 1) * p]);
        }
        let s = self.image_size;
        let t = Tensor::new(data, &[indices.len(), s, s, 3])?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub classes: usize,
}

/// Generate the dataset. Class layouts come from the seed; every sample adds
/// its own blob jitter and pixel noise. Samples are interleaved by class.
pub fn gen_synthetic(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut layout_rng = rng.fork();
    let lo = spec.margin();
    let hi = spec.image_size as f64 - 1.0 - spec.margin();
    let layouts: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..spec.blobs)
                .map(|_| Blob {
                    cy: layout_rng.uniform(lo, hi),
                    cx: layout_rng.uniform(lo, hi),
                    color: [
                        layout_rng.uniform(-1.0, 1.0),
                        layout_rng.uniform(-1.0, 1.0),
                        layout_rng.uniform(-1.0, 1.0),
                    ],
                })
                .collect()
        })
        .collect();
    let mut train_rng = rng.fork();
    let mut val_rng = rng.fork();
    let train = render_split(spec, &layouts, spec.train_per_class, &mut train_rng);
    let val = render_split(spec, &layouts, spec.val_per_class, &mut val_rng);
    Ok(Dataset {
        train,
        val,
        classes: spec.classes,
    })
}

fn render_split(spec: &DataSpec, layouts: &[Vec<Blob>], per_class: usize, rng: &mut SeededRng) -> Split {
    let s = spec.image_size;
    let mut images = Vec::with_capacity(per_class * layouts.len() * s * s * 3);
    let mut labels = Vec::with_capacity(per_class * layouts.len());
    let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    for _ in 0..per_class {
        for (k, layout) in layouts.iter().enumerate() {
            let shifted: Vec<(f64, f64, [f64; 3])> = layout
                .iter()
                .map(|b| {
                    let dy = rng.uniform(-spec.jitter, spec.jitter);
                    let dx = rng.uniform(-spec.jitter, spec.jitter);
                    (b.cy + dy, b.cx + dx, b.color)
                })
                .collect();
            for y in 0..s {
                for x in 0..s {
                    let mut px = [0.0; 3];
                    for &(cy, cx, color) in &shifted {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let w = (-d2 * inv).exp();
                        for ch in 0..3 {
                            px[ch] += w * color[ch];
                        }
                    }
                    for v in px {
                        let n = if spec.noise > 0.0 {
                            rng.normal(0.0, spec.noise)
                        } else {
                            0.0
                        };
                        images.push(v + n);
                    }
                }
            }
            labels.push(k);
        }
    }
    Split {
        images,
        labels,
        image_size: s,
    }
}
