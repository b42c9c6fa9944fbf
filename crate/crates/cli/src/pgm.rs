//! Binary PGM (P5) sample grids.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("pixel {value} outside [0, 1]")]
    PixelRange { value: f64 },
    #[error("{images} images do not fill a {rows}x{cols} grid")]
    GridSize { images: usize, rows: usize, cols: usize },
    #[error("image {index} has {len} pixels, expected {expected}")]
    ImageSize { index: usize, len: usize, expected: usize },
    #[error("malformed PGM: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Grayscale raster with values in `0..=255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, PgmError> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(PgmError::Malformed("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| PgmError::Malformed("header"))?);
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(PgmError::Malformed("expected P5 with maxval 255"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| PgmError::Malformed("dimensions"));
        let (width, height) = (num(fields[1])?, num(fields[2])?);
        let pixels = bytes.get(pos + 1..).ok_or(PgmError::Malformed("no payload"))?.to_vec();
        if pixels.len() != width * height {
            return Err(PgmError::Malformed("payload size"));
        }
        Ok(Self { width, height, pixels })
    }
}

fn quantize(v: f64) -> Result<u8, PgmError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(PgmError::PixelRange { value: v });
    }
    Ok((v * 255.0).round() as u8)
}

/// Tiles `h × w` images row-major into a `rows × cols` grid with 1-pixel
/// black separators.
pub fn tile(images: &[&[f64]], h: usize, w: usize, rows: usize, cols: usize) -> Result<Raster, PgmError> {
    if images.len() != rows * cols {
        return Err(PgmError::GridSize {
            images: images.len(),
            rows,
            cols,
        });
    }
    let height = rows * h + rows.saturating_sub(1);
    let width = cols * w + cols.saturating_sub(1);
    let mut pixels = vec![0u8; width * height];
    for (index, img) in images.iter().enumerate() {
        if img.len() != h * w {
            return Err(PgmError::ImageSize {
                index,
                len: img.len(),
                expected: h * w,
            });
        }
        let (top, left) = ((index / cols) * (h + 1), (index % cols) * (w + 1));
        for r in 0..h {
            for c in 0..w {
                pixels[(top + r) * width + left + c] = quantize(img[r * w + c])?;
            }
        }
    }
    Ok(Raster { width, height, pixels })
}

pub fn emit_pgm(images: &[&[f64]], h: usize, w: usize, rows: usize, cols: usize, path: &Path) -> Result<Raster, PgmError> {
    let raster = tile(images, h, w, rows, cols)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&raster.to_bytes())?;
    Ok(raster)
}
