//! `<root>/<class>/<image>` directory trees and bilinear resizing.

use std::fs;
use std::path::Path;

use image::RgbImage;
use log::warn;

use crate::episodes::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resize of a `[c, h, w]` tensor with half-pixel sample centers.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = src.shape();
    if s.len() != 3 || s.iter().any(|&d| d == 0) || out_h == 0 || out_w == 0 {
        return Err(Error::DegenerateInput(format!("cannot resize {s:?} to {out_h}x{out_w}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    // Source coordinate and interpolation weight along one axis.
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let d = src.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Channels-first `[3, size, size]` values in `[0, 1]`.
pub fn resize_to_input(image: &RgbImage, size: usize) -> Result<Tensor> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::DegenerateInput("zero-sized image".into()));
    }
    let mut planar = vec![0.0; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        for ch in 0..3 {
            planar[ch * h * w + y as usize * w + x as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    let t = resize_bilinear(&Tensor::new(&[3, h, w], planar)?, size, size)?;
    let clamped = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(&[3, size, size], clamped)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Labels follow the sorted class-directory names.
pub fn load_image_folder(root: &Path, size: usize) -> Result<LabeledDataset> {
    let class_dirs: Vec<_> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!("{} has no class directories", root.display())));
    }
    let mut samples = Vec::new();
    let mut names = Vec::with_capacity(class_dirs.len());
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let before = samples.len();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match image::open(&file) {
                Ok(img) => samples.push(Sample {
                    image: resize_to_input(&img.to_rgb8(), size)?,
                    label,
                }),
                Err(e) => warn!("skipping {}: {e}", file.display()),
            }
        }
        if samples.len() == before {
            return Err(Error::Config(format!("class directory {name} has no readable images")));
        }
        names.push(name);
    }
    LabeledDataset::new(samples, names)
}
