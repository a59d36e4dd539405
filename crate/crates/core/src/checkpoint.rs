//! Binary parameter snapshots.
//!
//! Layout: `"LRPC"`, version byte, u32 parameter count, then per parameter a
//! u16 name length, the UTF-8 name, a rank byte, u32 dims and f32 values.
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LRPC";
pub const VERSION: u8 = 1;

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Cursor that reports the offset of whatever it fails to read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            detail: detail.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32_values(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos = start;
            return Err(self.fail(format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(magic).unwrap_or("?"))));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("parameter count")?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Format {
            offset: at,
            detail: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(r.fail(format!("zero dimension in {name}")));
            }
            shape.push(d);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("size overflow"))?;
        let at = r.offset();
        let values = r.f32_values(n, name)?;
        let t = Tensor::new(&shape, values).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
        params.insert(name, t).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
    }
    r.finish()?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = encode(params)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        p.insert("a.weight", Tensor::from_fn(&[3, 2, 2], |_| rng.random_range(-1.0..1.0) as f32 as f64))
            .unwrap();
        p.insert("b", Tensor::from_fn(&[5], |_| rng.random::<f32>() as f64)).unwrap();
        p
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let p = random_params(1);
        assert_eq!(decode(&encode(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn layout_prefix() {
        let bytes = encode(&random_params(2)).unwrap();
        assert_eq!(&bytes[..5], b"LRPC\x01");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..11], &8u16.to_le_bytes());
        assert_eq!(&bytes[11..19], b"a.weight");
        assert_eq!(bytes[19], 3);
    }

    #[test]
    fn corruption_names_the_offset() {
        let mut bytes = encode(&random_params(3)).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        bytes = good.clone();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        let cut = &good[..good.len() - 3];
        match decode(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 19),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut long = good;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lrpc");
        let p = random_params(4);
        save_checkpoint(&path, &p).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
