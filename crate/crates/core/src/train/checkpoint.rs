//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian: the 8-byte magic `CIMSTE1\0`, a u32
//! tensor count, then per tensor a u32 name length, the UTF-8 name, a u32
//! rank, one u64 per extent and the f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CIMSTE1\0";

pub fn write_to(out: &mut impl Write, tensors: &[(String, &Tensor)]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(&mut BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

fn u32_from(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_from(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound on a single tensor's element count accepted from a file.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_from(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: String| Error::Data(format!("malformed checkpoint: {msg}"));
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let count = u32_from(r).map_err(io)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32_from(r).map_err(io)? as usize;
        let mut name = vec![0u8; len.min(1 << 16)];
        if len > name.len() {
            return Err(bad(format!("name length {len}")));
        }
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = u32_from(r).map_err(io)?;
        let mut shape = Vec::new();
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = u64_from(r).map_err(io)?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_ELEMENTS {
            return Err(bad(format!("{name} has {numel} elements")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            data.push(f64::from_bits(u64_from(r).map_err(io)?));
        }
        let t = Tensor::param(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(file))
}
