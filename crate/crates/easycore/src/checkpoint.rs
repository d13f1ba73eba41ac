//! Checkpoint file format.
//!
//! Layout, all integers and floats little-endian:
//!   magic bytes "EZC1"
//!   u32 tensor count
//!   per tensor: u16 name length, UTF-8 name bytes, u8 rank,
//!               rank * u32 dims, product(dims) * f64 values
//!
//! Values round-trip bit-exactly, so a reloaded model is the saved model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"EZC1";

pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn save<P: AsRef<Path>>(path: P, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| Error::Checkpoint(format!("tensor rank too large: {name}")))?;
        w.write_all(&[rank])?;
        for &dim in tensor.shape() {
            let d = u32::try_from(dim)
                .map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<Vec<Entry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut buf8 = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf8)?;
            values.push(f64::from_le_bytes(buf8));
        }
        entries.push(Entry {
            name,
            shape,
            values,
        });
    }
    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Model, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ezc");
        let config = ModelConfig::new(2, 6, 2, 3);
        let model = build_model(config, 77).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(config, &path).unwrap();
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            // Bitwise, not approximate.
            for (x, y) in a.tensor.values().iter().zip(b.tensor.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn header_starts_with_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ezc");
        let model = build_model(ModelConfig::new(1, 2, 0, 2), 0).unwrap();
        model.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"EZC1");
        // u32 tensor count follows: 4 tensors for a blockless model.
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
    }

    #[test]
    fn wrong_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ezc");
        let model = build_model(ModelConfig::new(2, 6, 2, 3), 1).unwrap();
        model.save_checkpoint(&path).unwrap();
        assert!(Model::load_checkpoint(ModelConfig::new(2, 6, 3, 3), &path).is_err());
        assert!(Model::load_checkpoint(ModelConfig::new(2, 7, 2, 3), &path).is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ezc");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load(&path).is_err());
    }
}
