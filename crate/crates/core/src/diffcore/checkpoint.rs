//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "KOLMOPRM"
//! version    u32      1
//! n_nets     u32
//! per net:   u32 n_sizes, then n_sizes x u32 layer sizes
//! n_params   u64
//! values     n_params x f64
//! ```
//!
//! The networks are listed in the order their parameters were allocated,
//! so the value array is the concatenation of each network's layout.

use std::io::{Read, Write};
use std::path::Path;

use super::Mlp;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KOLMOPRM";
const VERSION: u32 = 1;

pub fn write_params(path: &Path, nets: &[&Mlp], values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for net in nets {
        buf.extend_from_slice(&(net.sizes().len() as u32).to_le_bytes());
        for &s in net.sizes() {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, returning the per-network layer sizes and values.
pub fn read_params(path: &Path) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::format(path, "not a parameter checkpoint"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n_nets = cur.u32()? as usize;
    let mut sizes = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let n = cur.u32()? as usize;
        sizes.push(
            (0..n)
                .map(|_| cur.u32().map(|s| s as usize))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let n_params = cur.u64()? as usize;
    let expected: usize = sizes.iter().map(|s| Mlp::param_count(s)).sum();
    if n_params < expected {
        return Err(Error::format(
            path,
            format!("{n_params} parameters, layer header needs {expected}"),
        ));
    }
    let mut values = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok((sizes, values))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamVector;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_and_truncation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamVector::new();
        let a = Mlp::new(&[3, 4, 2], 0.1, &mut p, &mut rng).unwrap();
        let b = Mlp::new(&[5, 1], 0.0, &mut p, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_params(&path, &[&a, &b], &p.values).unwrap();
        let (sizes, values) = read_params(&path).unwrap();
        assert_eq!(sizes, vec![vec![3, 4, 2], vec![5, 1]]);
        assert_eq!(values, p.values);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_params(&path).is_err());
    }
}
