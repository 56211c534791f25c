//! SLKT binary tensor files.
//!
//! Layout: magic `b"SLKT"`, `u8` version, `u8` rank, `rank × u64` dims
//! (little-endian), then the f64 payload, little-endian, row-major.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"SLKT";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SlktError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected SLKT")]
    BadMagic([u8; 4]),
    #[error("unsupported SLKT version {0}")]
    UnsupportedVersion(u8),
    #[error("tensor of rank {0} cannot be encoded (max 255)")]
    RankTooLarge(usize),
    #[error("dimensions {0:?} overflow the element count")]
    Overflow(Vec<u64>),
}

pub fn write_tensor<W: Write>(t: &Tensor, mut w: W) -> Result<(), SlktError> {
    let rank = u8::try_from(t.rank()).map_err(|_| SlktError::RankTooLarge(t.rank()))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, SlktError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SlktError::BadMagic(magic));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(SlktError::UnsupportedVersion(head[0]));
    }
    let mut dims = Vec::with_capacity(head[1] as usize);
    let mut buf = [0u8; 8];
    for _ in 0..head[1] {
        r.read_exact(&mut buf)?;
        dims.push(u64::from_le_bytes(buf));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
        .ok_or_else(|| SlktError::Overflow(dims.clone()))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::new(&shape, data).expect("element count checked above"))
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * (t.rank() + t.len()));
    write_tensor(t, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, SlktError> {
    read_tensor(bytes)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<(), SlktError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor, SlktError> {
    read_tensor(BufReader::new(File::open(path)?))
}
