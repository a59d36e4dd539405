//! Synthetic fine-grained datasets: classes of one family share a background
//! texture and differ only in a small patch pasted at a jittered location.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::episodes::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub families: usize,
    /// Side of the square class patch.
    pub patch: usize,
    /// Maximum patch offset from the image center, per axis.
    pub jitter: usize,
    pub sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 25,
            per_class: 30,
            image_size: 84,
            families: 5,
            patch: 12,
            jitter: 8,
            sigma: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.families == 0 || self.patch == 0 {
            return Err(Error::Config("synthetic spec needs positive counts".into()));
        }
        if self.patch > self.image_size {
            return Err(Error::Config(format!(
                "patch {} larger than image {}",
                self.patch, self.image_size
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be finite and >= 0", self.sigma)));
        }
        Ok(())
    }
}

/// Ground truth for one generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthRecord {
    pub index: usize,
    pub label: usize,
    pub family: usize,
    /// Top-left corner of the pasted patch.
    pub patch_x: usize,
    pub patch_y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dataset: LabeledDataset,
    pub records: Vec<SynthRecord>,
}

impl SynthDataset {
    pub fn metadata_csv(&self) -> String {
        let mut s = String::from("index,label,family,patch_x,patch_y\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.index, r.label, r.family, r.patch_x, r.patch_y);
        }
        s
    }

    pub fn write_metadata(&self, path: &Path) -> Result<()> {
        fs::write(path, self.metadata_csv())?;
        Ok(())
    }
}

fn background(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        let base = rng.random_range(0.25..0.75);
        let (fx, fy) = (rng.random_range(0.2..1.2), rng.random_range(0.2..1.2));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                out.push(base + 0.15 * (fx * x as f64 + fy * y as f64 + phase).sin());
            }
        }
    }
    out
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let backgrounds: Vec<Vec<f64>> = (0..spec.families).map(|_| background(size, &mut rng)).collect();
    let patches: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..3 * spec.patch * spec.patch).map(|_| rng.random::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;

    let center = (size - spec.patch) / 2;
    let max_corner = size - spec.patch;
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for label in 0..spec.classes {
        let family = label % spec.families;
        for _ in 0..spec.per_class {
            let mut offset = || {
                let j = spec.jitter as i64;
                let d = if j == 0 { 0 } else { rng.random_range(-j..=j) };
                (center as i64 + d).clamp(0, max_corner as i64) as usize
            };
            let (px, py) = (offset(), offset());
            let mut img = backgrounds[family].clone();
            let patch = &patches[label];
            for ch in 0..3 {
                for y in 0..spec.patch {
                    for x in 0..spec.patch {
                        img[ch * size * size + (py + y) * size + px + x] =
                            patch[ch * spec.patch * spec.patch + y * spec.patch + x];
                    }
                }
            }
            if spec.sigma > 0.0 {
                for v in &mut img {
                    *v += noise.sample(&mut rng);
                }
            }
            for v in &mut img {
                *v = v.clamp(0.0, 1.0);
            }
            records.push(SynthRecord {
                index: samples.len(),
                label,
                family,
                patch_x: px,
                patch_y: py,
            });
            samples.push(Sample {
                image: Tensor::new(&[3, size, size], img)?,
                label,
            });
        }
    }
    let names = (0..spec.classes).map(|c| format!("class{c:03}")).collect();
    Ok(SynthDataset {
        dataset: LabeledDataset::new(samples, names)?,
        records,
    })
}

/// Leave-one-out nearest-centroid accuracy in pixel space.
pub fn nearest_centroid_accuracy(dataset: &LabeledDataset) -> f64 {
    let by_class = dataset.by_class();
    let dim = dataset.samples()[0].image.len();
    let sums: Vec<Vec<f64>> = by_class
        .iter()
        .map(|idx| {
            let mut s = vec![0.0; dim];
            for &i in idx {
                for (a, b) in s.iter_mut().zip(dataset.samples()[i].image.data()) {
                    *a += b;
                }
            }
            s
        })
        .collect();
    let mut correct = 0;
    for sample in dataset.samples() {
        let mut best = (f64::INFINITY, usize::MAX);
        for (c, idx) in by_class.iter().enumerate() {
            let own = c == sample.label;
            let n = idx.len() - usize::from(own);
            if n == 0 {
                continue;
            }
            let d: f64 = sums[c]
                .iter()
                .zip(sample.image.data())
                .map(|(s, x)| {
                    let centroid = (s - if own { *x } else { 0.0 }) / n as f64;
                    (centroid - x).powi(2)
                })
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        correct += usize::from(best.1 == sample.label);
    }
    correct as f64 / dataset.len() as f64
}
