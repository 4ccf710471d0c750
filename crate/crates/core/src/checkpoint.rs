//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SDDCKPT1"
//! meta_len  u32      followed by meta_len bytes of UTF-8 JSON metadata
//! count     u32      number of entries
//! entry*    name_len u32, name bytes (UTF-8), kind u8 (0 = trainable, 1 = buffer),
//!           ndim u32, ndim x u64 dims, product(dims) x f64 values
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDDCKPT1";

pub fn write_to<W: Write>(mut w: W, store: &ParamStore, meta: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[match e.kind {
            ParamKind::Trainable => 0u8,
            ParamKind::Buffer => 1u8,
        }])?;
        w.write_all(&(e.value.shape().len() as u32).to_le_bytes())?;
        for d in e.value.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in e.value.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Reads a container, returning the stored parameters and metadata string.
pub fn read_from<R: Read>(mut r: R) -> Result<(ParamStore, String)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
        };
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        store.add(name, kind, Tensor::new(shape, data)?);
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(f, store, meta)
}

pub fn load(path: &Path) -> Result<(ParamStore, String)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}
