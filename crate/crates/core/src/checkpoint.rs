//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "TWCK"
//! u32    format version
//! u64    tensor count
//! per tensor:
//!   u32  name length, then UTF-8 name bytes
//!   u32  rank, then rank x u64 dimensions
//!   f64  payload, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TWCK";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    read_array::<4, _>(r, what).map(u32::from_le_bytes)
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    read_array::<8, _>(r, what).map(u64::from_le_bytes)
}

pub fn read_from<R: Read>(mut r: R) -> Result<ParamStore> {
    let magic = read_array::<4, _>(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a parameter archive (bad magic)".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let count = read_u64(&mut r, "tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name of tensor {i}: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint(format!("tensor {i} has a non-UTF-8 name")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array::<8, _>(&mut r, &name)?));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, t)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    write_to(store, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_from(BufReader::new(File::open(path)?))
}
