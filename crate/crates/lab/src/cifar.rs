//! CIFAR-10 binary batches: 3073-byte records of one label byte followed
//! by 1024 red, 1024 green and 1024 blue pixel bytes.

use std::path::{Path, PathBuf};

use decorr_core::data::{Dataset, Split};
use decorr_core::Tensor;

use crate::error::{label, read, FormatError, Result};

pub const PIXELS: usize = 3 * 32 * 32;
pub const RECORD: usize = PIXELS + 1;

/// Labels and pixel bytes of one batch file.
pub fn parse(bytes: &[u8], file: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() {
        return Err(FormatError::parse(file, 0, "empty file"));
    }
    if !bytes.len().is_multiple_of(RECORD) {
        let off = bytes.len() - bytes.len() % RECORD;
        return Err(FormatError::parse(
            file,
            off,
            format!("length {} is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (k, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(FormatError::parse(file, k * RECORD, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn load_cifar10_binary(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let (l, px) = parse(&read(p)?, &label(p))?;
        labels.extend(l.into_iter().map(usize::from));
        pixels.extend(px.into_iter().map(|b| b as f32 / 255.0));
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 3, 32, 32], pixels)?;
    Ok(Dataset::new("cifar10", split, images, labels, 10)?)
}

/// Loads the canonical batch files from `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let base = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![base.join("test_batch.bin")],
    };
    load_cifar10_binary(&files, split)
}

pub fn encode_record(label: u8, pixels: &[u8; PIXELS]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let mut px = [0u8; PIXELS];
        for (i, p) in px.iter_mut().enumerate() {
            *p = (i * 7 % 256) as u8;
        }
        let bytes = encode_record(3, &px);
        assert_eq!(bytes.len(), 3073);
        let (l, back) = parse(&bytes, "x").unwrap();
        assert_eq!(l, vec![3]);
        assert_eq!(back.as_slice(), &px[..]);
    }

    #[test]
    fn rejects_bad_length_and_label() {
        let px = [0u8; PIXELS];
        let mut two = encode_record(1, &px);
        two.extend(encode_record(2, &px));
        two.pop();
        assert_eq!(parse(&two, "x").unwrap_err().offset(), Some(RECORD as u64));
        let mut bad = encode_record(1, &px);
        bad.extend(encode_record(11, &px));
        assert_eq!(parse(&bad, "x").unwrap_err().offset(), Some(RECORD as u64));
        assert_eq!(parse(&[], "x").unwrap_err().offset(), Some(0));
    }
}
