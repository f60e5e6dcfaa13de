//! Binary checkpoint format for parameter stores.
//!
//! Layout, all integers little-endian:
//! magic `SPNC`, version `u32 = 1`, tensor count `u32`, then per tensor:
//! name length `u32`, UTF-8 name, rank `u32`, dims `u32` each, and the
//! values as little-endian `f32`. Tensors are written in name order, so a
//! store serializes to exactly one byte sequence.

use super::params::ParameterStore;
use super::Tensor;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SPNC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint name is not UTF-8")]
    BadName,
    #[error("tensor {name:?} has unsupported rank {rank}")]
    BadRank { name: String, rank: u32 },
}

pub fn save_checkpoint(params: &ParameterStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
        w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u32(&mut r)?;
        let dims: Vec<usize> = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(CheckpointError::BadRank { name, rank }),
        };
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        params.insert(name, Tensor::from_vec(rows, cols, data).expect("sized"));
    }
    Ok(params)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, io::Error> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_at_storage_precision() {
        let dir = std::env::temp_dir().join(format!("spnc-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.spnc");

        let mut params = ParameterStore::new();
        params.insert(
            "a.w",
            Tensor::from_vec(2, 3, vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap(),
        );
        params.insert("a.b", Tensor::row(&[1.0, 2.0, 3.0]));

        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);

        // Writing the loaded store again produces identical bytes.
        let path2 = dir.join("rt2.spnc");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_layout_is_pinned() {
        let dir = std::env::temp_dir().join(format!("spnc-hdr-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("hdr.spnc");
        let mut params = ParameterStore::new();
        params.insert("w", Tensor::scalar(1.0));
        save_checkpoint(&params, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"SPNC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1); // version
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1); // count
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1); // name len
        assert_eq!(&bytes[16..17], b"w");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("spnc-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.spnc");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
