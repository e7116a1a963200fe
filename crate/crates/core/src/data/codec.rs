//! Raw tensor container: magic `MERA`, then format version, rank and
//! extents as little-endian u32, then the row-major f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MERA";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(io)?;
    for &e in tensor.shape() {
        w.write_all(&(e as u32).to_le_bytes()).map_err(io)?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let rank = read_u32(&mut r, "rank")? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Truncated(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r, "extent")? as usize);
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    read_exact(&mut r, &mut payload, "payload")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::Truncated(e.to_string()))? != 0 {
        return Err(Error::Truncated("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
