//! 8-bit PGM (P5) and PPM (P6) image grids.

use std::path::Path;

use decorr_core::Tensor;

use crate::error::{label, read, write, FormatError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pub pixels: Vec<u8>,
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays out `rows` of `C×H×W` images (values in `[0, 1]`) with `pad` black
/// pixels between cells. Returns `None` when there is nothing to draw.
pub fn grid(rows: &[Vec<Tensor<f32>>], pad: usize) -> Result<Option<Pnm>> {
    let Some(first) = rows.iter().flatten().next() else {
        return Ok(None);
    };
    let s = first.shape().to_vec();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(decorr_core::Error::Dimension {
            op: "image_grid",
            msg: format!("cells must be 1×H×W or 3×H×W, got {s:?}"),
        }
        .into());
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * w + cols.saturating_sub(1) * pad;
    let height = rows.len() * h + rows.len().saturating_sub(1) * pad;
    let mut pixels = vec![0u8; width * height * c];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.shape() != s.as_slice() {
                return Err(decorr_core::Error::Shape {
                    op: "image_grid",
                    lhs: img.shape().to_vec(),
                    rhs: s.clone(),
                }
                .into());
            }
            let (y0, x0) = (ri * (h + pad), ci * (w + pad));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = img.data()[(ch * h + y) * w + x];
                        pixels[((y0 + y) * width + x0 + x) * c + ch] = to_byte(v);
                    }
                }
            }
        }
    }
    Ok(Some(Pnm {
        width,
        height,
        channels: c,
        pixels,
    }))
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], file: &str) -> Result<Pnm> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(FormatError::parse(file, pos, "truncated header"));
            }
            fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
        }
        let channels = match fields[0].1 {
            "P5" => 1,
            "P6" => 3,
            m => return Err(FormatError::parse(file, 0, format!("unsupported magic {m:?}"))),
        };
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .1
                .parse()
                .map_err(|_| FormatError::parse(file, fields[i].0, format!("bad number {:?}", fields[i].1)))
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(FormatError::parse(file, fields[3].0, format!("maxval {maxval}, expected 255")));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(FormatError::parse(file, bytes.len(), "truncated raster"));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }
}

/// Writes a grid; an empty selection only logs a warning.
pub fn write_grid(path: &Path, rows: &[Vec<Tensor<f32>>]) -> Result<bool> {
    match grid(rows, 2)? {
        Some(p) => {
            write(path, &p.encode())?;
            Ok(true)
        }
        None => {
            log::warn!("no images selected for {}", path.display());
            Ok(false)
        }
    }
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    Pnm::decode(&read(path)?, &label(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_grid_round_trip() {
        let img = |v: f32| Tensor::full(&[1, 2, 3], v);
        let rows = vec![vec![img(0.0), img(1.0)], vec![img(0.5)]];
        let p = grid(&rows, 1).unwrap().unwrap();
        assert_eq!((p.width, p.height), (7, 5));
        assert_eq!(p.pixels[3], 0); // padding column
        assert_eq!(p.pixels[4], 255);
        assert_eq!(Pnm::decode(&p.encode(), "g").unwrap(), p);
    }

    #[test]
    fn color_and_empty() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f32 / 11.0);
        let p = grid(&[vec![t]], 0).unwrap().unwrap();
        assert_eq!(p.channels, 3);
        // first pixel interleaves the three channel planes
        assert_eq!(&p.pixels[..3], &[0, to_byte(4.0 / 11.0), to_byte(8.0 / 11.0)]);
        assert_eq!(Pnm::decode(&p.encode(), "c").unwrap(), p);
        assert!(grid(&[], 0).unwrap().is_none());
    }

    #[test]
    fn header_comments_and_errors() {
        let b = b"P5\n# hi\n2 1\n255\n\x00\xff";
        let p = Pnm::decode(b, "x").unwrap();
        assert_eq!(p.pixels, vec![0, 255]);
        assert!(Pnm::decode(b"P2\n1 1\n255\n0", "x").is_err());
        assert!(Pnm::decode(b"P5\n2 2\n255\n\x00", "x").is_err());
    }
}
