//! MNIST in the big-endian IDX format.

use std::path::Path;

use decorr_core::data::{Dataset, Split};
use decorr_core::Tensor;

use crate::error::{label, read, FormatError, Reader, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;

fn be32(r: &mut Reader<'_>, what: &str) -> Result<u32> {
    Ok(u32::from_be_bytes(r.array(what)?))
}

/// Pixel bytes and sample count of an image file.
pub fn parse_images<'a>(bytes: &'a [u8], file: &str) -> Result<(usize, &'a [u8])> {
    let mut r = Reader::new(bytes, file);
    let magic = be32(&mut r, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(FormatError::parse(file, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be32(&mut r, "count")? as usize;
    for (off, what) in [(8, "rows"), (12, "cols")] {
        let d = be32(&mut r, what)? as usize;
        if d != SIDE {
            return Err(FormatError::parse(file, off, format!("{what} = {d}, expected {SIDE}")));
        }
    }
    let need = n * SIDE * SIDE;
    if r.remaining() < need {
        return Err(FormatError::parse(
            file,
            bytes.len(),
            format!("truncated pixel data: {n} images need {need} bytes, found {}", r.remaining()),
        ));
    }
    if r.remaining() > need {
        return Err(FormatError::parse(file, 16 + need, "trailing bytes after pixel data"));
    }
    Ok((n, &bytes[16..]))
}

pub fn parse_labels<'a>(bytes: &'a [u8], file: &str) -> Result<&'a [u8]> {
    let mut r = Reader::new(bytes, file);
    let magic = be32(&mut r, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(FormatError::parse(file, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = be32(&mut r, "count")? as usize;
    if r.remaining() != n {
        let off = if r.remaining() < n { bytes.len() } else { 8 + n };
        return Err(FormatError::parse(
            file,
            off,
            format!("label count {n} but {} label bytes", r.remaining()),
        ));
    }
    if let Some(i) = bytes[8..].iter().position(|&l| l >= 10) {
        return Err(FormatError::parse(file, 8 + i, format!("label {} out of range", bytes[8 + i])));
    }
    Ok(&bytes[8..])
}

/// Builds a dataset from raw IDX bytes.
pub fn decode(images: &[u8], labels: &[u8], split: Split, files: (&str, &str)) -> Result<Dataset> {
    let (n, px) = parse_images(images, files.0)?;
    let lb = parse_labels(labels, files.1)?;
    if lb.len() != n {
        return Err(FormatError::parse(
            files.1,
            4,
            format!("{} labels for {n} images", lb.len()),
        ));
    }
    let data = px.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(&[n, 1, SIDE, SIDE], data)?;
    Ok(Dataset::new(
        "mnist",
        split,
        images,
        lb.iter().map(|&l| l as usize).collect(),
        10,
    )?)
}

pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    decode(&ib, &lb, split, (&label(images), &label(labels)))
}

/// Loads the canonical file names from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist_idx(
        &dir.join(format!("{stem}-images-idx3-ubyte")),
        &dir.join(format!("{stem}-labels-idx1-ubyte")),
        split,
    )
}

pub fn encode_images(n: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, SIDE as u32, SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> (Vec<u8>, Vec<u8>) {
        let px: Vec<u8> = (0..n * 784).map(|i| (i % 256) as u8).collect();
        let lb: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        (encode_images(n, &px), encode_labels(&lb))
    }

    #[test]
    fn decodes_and_scales() {
        let (i, l) = sample(3);
        let ds = decode(&i, &l, Split::Test, ("i", "l")).unwrap();
        assert_eq!(ds.images().shape(), &[3, 1, 28, 28]);
        assert_eq!(ds.images().data()[0], 0.0);
        assert_eq!(ds.images().data()[255], 1.0);
        assert_eq!(ds.labels(), &[0, 1, 2]);
    }

    #[test]
    fn rejects_corruption_with_offsets() {
        let (mut i, l) = sample(2);
        let mut bad = i.clone();
        bad[3] = 0x01;
        assert_eq!(decode(&bad, &l, Split::Test, ("i", "l")).unwrap_err().offset(), Some(0));
        let mut bad = i.clone();
        bad[11] = 27;
        assert_eq!(decode(&bad, &l, Split::Test, ("i", "l")).unwrap_err().offset(), Some(8));
        let n = i.len();
        i.truncate(n - 5);
        assert_eq!(decode(&i, &l, Split::Test, ("i", "l")).unwrap_err().offset(), Some(n as u64 - 5));
        let (i, mut l) = sample(2);
        l[9] = 10;
        assert_eq!(decode(&i, &l, Split::Test, ("i", "l")).unwrap_err().offset(), Some(9));
        assert_eq!(decode(&i[..7], &l, Split::Test, ("i", "l")).unwrap_err().offset(), Some(7));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (i, _) = sample(2);
        let l = encode_labels(&[1, 2, 3]);
        assert!(decode(&i, &l, Split::Test, ("i", "l")).is_err());
    }
}
