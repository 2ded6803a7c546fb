//! `FMAT` matrices: magic, version u32, rows u64, cols u64, then row-major
//! little-endian f64 values.

use std::path::Path;

use decorr_core::Tensor;

use crate::error::{label, read, write, FormatError, Reader, Result};

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;

pub fn encode(m: &Tensor<f64>) -> Result<Vec<u8>> {
    if m.rank() != 2 {
        return Err(decorr_core::Error::Dimension {
            op: "fmat",
            msg: format!("expected a matrix, got shape {:?}", m.shape()),
        }
        .into());
    }
    let mut out = Vec::with_capacity(24 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.shape()[0] as u64).to_le_bytes());
    out.extend_from_slice(&(m.shape()[1] as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], file: &str) -> Result<Tensor<f64>> {
    let mut r = Reader::new(bytes, file);
    if r.take(4, "magic")? != MAGIC {
        return Err(FormatError::parse(file, 0, "bad magic, expected FMAT"));
    }
    let v = u32::from_le_bytes(r.array("version")?);
    if v != VERSION {
        return Err(FormatError::parse(file, 4, format!("unsupported version {v}")));
    }
    let rows = u64::from_le_bytes(r.array("rows")?) as usize;
    let cols = u64::from_le_bytes(r.array("cols")?) as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| FormatError::parse(file, 8, "dimensions overflow"))?;
    if r.remaining() != 8 * n {
        let off = if r.remaining() < 8 * n { bytes.len() } else { 24 + 8 * n };
        return Err(FormatError::parse(
            file,
            off,
            format!("{rows}×{cols} needs {} value bytes, found {}", 8 * n, r.remaining()),
        ));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(&[rows, cols], data)?)
}

pub fn save(path: &Path, m: &Tensor<f64>) -> Result<()> {
    write(path, &encode(m)?)
}

pub fn load(path: &Path) -> Result<Tensor<f64>> {
    decode(&read(path)?, &label(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let m = Tensor::new(&[2, 3], vec![1.0, -2.5, f64::MIN_POSITIVE, 0.0, 1e300, -0.0]).unwrap();
        let b = encode(&m).unwrap();
        let back = decode(&b, "m").unwrap();
        assert_eq!(back.shape(), m.shape());
        for (x, y) in back.data().iter().zip(m.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let mut bad = b.clone();
        bad[0] = b'G';
        assert_eq!(decode(&bad, "m").unwrap_err().offset(), Some(0));
        assert_eq!(decode(&b[..30], "m").unwrap_err().offset(), Some(30));
    }
}
