//! Binary parameter checkpoints.
//!
//! Layout: magic `GCLC`, `u16` version, then until end of file, per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, one `u32` per dimension
//! and the values as little-endian `f64` in row-major order.

use std::path::Path;

use ndarray::Array2;

use crate::config::ExperimentConfig;
use crate::graph::Graph;
use crate::training::{ModelState, Pretrained};
use crate::{Error, Matrix, Result};

pub const MAGIC: &[u8; 4] = b"GCLC";
pub const VERSION: u16 = 1;

pub fn encode(tensors: &[(String, &Matrix)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, m) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        for d in [m.nrows(), m.ncols()] {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_le_bytes());
        }
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Checkpoint(format!("{what} too large for the format"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>()?[0];
        let dims: Vec<usize> = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
            .collect::<Result<_>>()?;
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [a, b] => (a, b),
            _ => return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}"))),
        };
        let total = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = r.take(total.checked_mul(8).ok_or_else(|| too_big("tensor"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Array2::from_shape_vec((rows, cols), values).expect("size checked");
        out.push((name, m));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, &Matrix)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Matrix)>> {
    decode(&std::fs::read(path)?)
}

pub fn save_state(state: &ModelState, path: &Path) -> Result<()> {
    save(path, &state.named())
}

/// Fills `template` (which fixes names and shapes) from the file at `path`.
pub fn load_state(template: &mut ModelState, path: &Path) -> Result<()> {
    template.load_named(load(path)?)
}

pub fn save_pretrained(pre: &Pretrained, path: &Path) -> Result<()> {
    save(path, &pre.named())
}

pub fn load_pretrained(g: &Graph, cfg: &ExperimentConfig, path: &Path) -> Result<Pretrained> {
    Pretrained::from_named(g, cfg, load(path)?)
}
