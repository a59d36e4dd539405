//! `LRPT` raw tensor datasets: magic, version byte, u32 sample count, then
//! per sample a u32 label, u32 `c, h, w` and little-endian f32 values.

use std::fs;
use std::path::Path;

use crate::checkpoint::Reader;
use crate::episodes::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LRPT";
pub const VERSION: u8 = 1;

pub fn encode(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for s in dataset.samples() {
        if s.image.rank() != 3 {
            return Err(Error::shape("raw_dataset", format!("image of shape {:?}", s.image.shape())));
        }
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for &d in s.image.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let label = r.u32("label")? as usize;
        let mut shape = [0usize; 3];
        for d in &mut shape {
            *d = r.u32("dimension")? as usize;
            if *d == 0 {
                return Err(r.fail(format!("sample {i} has a zero dimension")));
            }
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("size overflow"))?;
        let values = r.f32_values(n, "sample values")?;
        samples.push(Sample {
            image: Tensor::new(&shape, values)?,
            label,
        });
    }
    r.finish()?;
    Ok(LabeledDataset::from_samples(samples))
}

pub fn save_raw(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    fs::write(path, encode(dataset)?)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<LabeledDataset> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> LabeledDataset {
        let samples = (0..4)
            .map(|i| Sample {
                image: Tensor::from_fn(&[3, 2, 3], |j| ((i * 18 + j) as f32 / 71.0) as f64),
                label: i % 2,
            })
            .collect();
        LabeledDataset::from_samples(samples)
    }

    #[test]
    fn round_trip_bit_exact() {
        let d = ds();
        let bytes = encode(&d).unwrap();
        assert_eq!(bytes.len(), 9 + 4 * (16 + 18 * 4));
        assert_eq!(decode(&bytes).unwrap(), d);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode(&ds()).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut zero = bytes;
        zero[13..17].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&zero), Err(Error::Format { offset: 17, .. })));
    }
}
