//! Digit glyph bank: MNIST IDX ingestion with a procedural fallback.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const GLYPH_SIZE: usize = 28;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// 28x28 grayscale digit glyphs grouped by digit class.
#[derive(Debug, Clone)]
pub struct GlyphBank {
    per_digit: Vec<Vec<Vec<u8>>>,
}

impl GlyphBank {
    /// Ten synthetic seven-segment-style shapes, one per digit.
    pub fn procedural() -> GlyphBank {
        let mut per_digit = vec![Vec::new(); 10];
        for (digit, glyphs) in per_digit.iter_mut().enumerate() {
            glyphs.push(render_segments(digit));
        }
        GlyphBank { per_digit }
    }

    /// Parses the standard big-endian IDX pair. Image and label counts must
    /// agree; glyphs must be 28x28.
    pub fn from_idx(images_path: &Path, labels_path: &Path) -> Result<GlyphBank> {
        let images = load_idx_images(images_path)?;
        let labels = load_idx_labels(labels_path)?;
        if images.len() != labels.len() {
            return Err(Error::Malformed {
                path: labels_path.to_path_buf(),
                offset: 4,
                message: format!(
                    "label count {} does not match image count {}",
                    labels.len(),
                    images.len()
                ),
            });
        }
        let mut per_digit = vec![Vec::new(); 10];
        for (glyph, label) in images.into_iter().zip(labels) {
            if label > 9 {
                return Err(Error::Malformed {
                    path: labels_path.to_path_buf(),
                    offset: 8,
                    message: format!("label {label} out of digit range"),
                });
            }
            per_digit[label as usize].push(glyph);
        }
        Ok(GlyphBank { per_digit })
    }

    /// IDX files when both paths are given, procedural shapes otherwise.
    pub fn load_or_procedural(
        images_path: Option<&Path>,
        labels_path: Option<&Path>,
    ) -> Result<GlyphBank> {
        match (images_path, labels_path) {
            (Some(i), Some(l)) => GlyphBank::from_idx(i, l),
            (None, None) => Ok(GlyphBank::procedural()),
            _ => Err(Error::InvalidConfig(
                "IDX ingestion needs both an images and a labels path".into(),
            )),
        }
    }

    pub fn glyph_count(&self) -> usize {
        self.per_digit.iter().map(Vec::len).sum()
    }

    pub fn digit_classes_present(&self) -> usize {
        self.per_digit.iter().filter(|g| !g.is_empty()).count()
    }

    /// A glyph of the given digit; `pick` indexes into the class deterministically.
    pub fn glyph(&self, digit: usize, pick: usize) -> &[u8] {
        let class = &self.per_digit[digit];
        &class[pick % class.len()]
    }

    /// Digits that actually have glyphs.
    pub fn available_digits(&self) -> Vec<usize> {
        (0..10).filter(|&d| !self.per_digit[d].is_empty()).collect()
    }
}

pub fn load_idx_images(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = fs::read(path)?;
    let mut r = IdxReader::new(&bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.malformed(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if rows != GLYPH_SIZE || cols != GLYPH_SIZE {
        return Err(r.malformed(format!(
            "expected {GLYPH_SIZE}x{GLYPH_SIZE} glyphs, file declares {rows}x{cols}"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(r.take(rows * cols)?.to_vec());
    }
    Ok(out)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let mut r = IdxReader::new(&bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.malformed(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = r.u32_be()? as usize;
    Ok(r.take(count)?.to_vec())
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        IdxReader {
            bytes,
            offset: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.offset,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn malformed(&self, message: String) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset: self.offset,
            message,
        }
    }
}

// seven-segment layout on the 28x28 canvas
const SEG_T: usize = 0b0000001;
const SEG_TL: usize = 0b0000010;
const SEG_TR: usize = 0b0000100;
const SEG_M: usize = 0b0001000;
const SEG_BL: usize = 0b0010000;
const SEG_BR: usize = 0b0100000;
const SEG_B: usize = 0b1000000;

const DIGIT_SEGMENTS: [usize; 10] = [
    SEG_T | SEG_TL | SEG_TR | SEG_BL | SEG_BR | SEG_B,
    SEG_TR | SEG_BR,
    SEG_T | SEG_TR | SEG_M | SEG_BL | SEG_B,
    SEG_T | SEG_TR | SEG_M | SEG_BR | SEG_B,
    SEG_TL | SEG_TR | SEG_M | SEG_BR,
    SEG_T | SEG_TL | SEG_M | SEG_BR | SEG_B,
    SEG_T | SEG_TL | SEG_M | SEG_BL | SEG_BR | SEG_B,
    SEG_T | SEG_TR | SEG_BR,
    SEG_T | SEG_TL | SEG_TR | SEG_M | SEG_BL | SEG_BR | SEG_B,
    SEG_T | SEG_TL | SEG_TR | SEG_M | SEG_BR | SEG_B,
];

fn render_segments(digit: usize) -> Vec<u8> {
    let mut glyph = vec![0u8; GLYPH_SIZE * GLYPH_SIZE];
    let segs = DIGIT_SEGMENTS[digit];
    let mut rect = |y0: usize, y1: usize, x0: usize, x1: usize| {
        for y in y0..y1 {
            for x in x0..x1 {
                glyph[y * GLYPH_SIZE + x] = 255;
            }
        }
    };
    // canvas margins 4, stroke thickness 4
    let (lo, hi, mid) = (4, 24, 12);
    if segs & SEG_T != 0 {
        rect(lo, lo + 4, lo, hi);
    }
    if segs & SEG_M != 0 {
        rect(mid, mid + 4, lo, hi);
    }
    if segs & SEG_B != 0 {
        rect(hi - 4, hi, lo, hi);
    }
    if segs & SEG_TL != 0 {
        rect(lo, mid + 2, lo, lo + 4);
    }
    if segs & SEG_TR != 0 {
        rect(lo, mid + 2, hi - 4, hi);
    }
    if segs & SEG_BL != 0 {
        rect(mid + 2, hi, lo, lo + 4);
    }
    if segs & SEG_BR != 0 {
        rect(mid + 2, hi, hi - 4, hi);
    }
    glyph
}
