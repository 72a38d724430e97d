//! Full-precision array container: magic "TSAR", ndim u32 LE, dims u32 LE,
//! then f64 LE data in row-major order.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSAR";

pub fn to_bytes(dims: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + dims.len() * 4 + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let fail = |m: &str| Error::Artifact(format!("array file: {m}"));
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let ndim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + 4 * ndim {
        return Err(fail("truncated header"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let data_off = 8 + 4 * ndim;
    if bytes.len() != data_off + 8 * count {
        return Err(fail("data length mismatch"));
    }
    let data: Vec<f64> = bytes[data_off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| fail(&e.to_string()))
}

pub fn write_array3(path: &std::path::Path, a: &Array3<f64>) -> Result<()> {
    std::fs::write(path, to_bytes(a.shape(), a.as_slice().unwrap()))?;
    Ok(())
}

pub fn write_array2(path: &std::path::Path, a: &Array2<f64>) -> Result<()> {
    std::fs::write(path, to_bytes(a.shape(), a.as_slice().unwrap()))?;
    Ok(())
}

pub fn read_array(path: &std::path::Path) -> Result<ArrayD<f64>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
