//! Little-endian binary file helpers shared by the on-disk formats
//! (feature maps, whiteners, descriptor databases, checkpoints).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8], path: &Path) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::malformed(path, "truncated magic"))?;
    if &buf != magic {
        return Err(Error::malformed(
            path,
            format!(
                "wrong magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&buf)
            ),
        ));
    }
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::malformed(path, "truncated u32"))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u32<W: Write>(w: &mut W, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

/// Read `n` f32 values, widened to f64.
pub fn read_f32_vec<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::malformed(path, "truncated payload"))?;
    let mut out = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::malformed(path, "non-finite value in payload"));
        }
        out.push(v as f64);
    }
    Ok(out)
}

/// Write f64 values narrowed to f32 LE.
pub fn write_f32_slice<W: Write>(w: &mut W, vals: &[f64], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for &v in vals {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))
}
