//! Dataset ingestion and generation.

mod folder;
mod raw;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use folder::{load_image_folder, resize_bilinear, resize_to_input};
pub use raw::{decode as decode_raw, encode as encode_raw, load_raw, save_raw};
pub use synth::{generate_synthetic, nearest_centroid_accuracy, SynthDataset, SynthRecord, SynthSpec};

use crate::episodes::{LabeledDataset, Sample};
use crate::error::{Error, Result};

/// File name of the raw tensor file inside a dataset directory.
pub const RAW_FILE: &str = "data.lrpt";
/// File name of the synthetic ground-truth sidecar.
pub const METADATA_FILE: &str = "metadata.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Folder,
    Raw,
    Synth,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "folder" => Ok(DataFormat::Folder),
            "raw" => Ok(DataFormat::Raw),
            "synth" => Ok(DataFormat::Synth),
            other => Err(Error::Config(format!("unknown data format {other}"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Folder => "folder",
            DataFormat::Raw => "raw",
            DataFormat::Synth => "synth",
        })
    }
}

/// A raw dataset path may name the file itself or its directory.
pub fn raw_path(root: &Path) -> PathBuf {
    if root.is_dir() {
        root.join(RAW_FILE)
    } else {
        root.to_path_buf()
    }
}

/// Resizes every image to `[3, size, size]` where needed.
pub fn fit_to_input(dataset: LabeledDataset, size: usize) -> Result<LabeledDataset> {
    let names = dataset.class_names().to_vec();
    let samples = dataset
        .samples()
        .iter()
        .map(|s| {
            let shape = s.image.shape();
            if shape.len() != 3 || shape[0] != 3 {
                return Err(Error::shape("fit_to_input", format!("image of shape {shape:?}")));
            }
            let image = if shape[1] == size && shape[2] == size {
                s.image.clone()
            } else {
                resize_bilinear(&s.image, size, size)?
            };
            Ok(Sample { image, label: s.label })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(samples, names)
}

pub fn load_dataset(format: DataFormat, root: &Path, size: usize) -> Result<LabeledDataset> {
    match format {
        DataFormat::Folder => load_image_folder(root, size),
        DataFormat::Raw | DataFormat::Synth => fit_to_input(load_raw(&raw_path(root))?, size),
    }
}
