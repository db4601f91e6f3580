//! Grayscale rasters, binary masks, pixel rectangles and the binary
//! portable graymap (P5) codec they are stored with.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::arg(format!(
                "image buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Rounds every pixel to the nearest multiple of 1/255, the set of values
    /// an 8-bit graymap can hold exactly.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = f64::from(to_u8(*v)) / 255.0;
        }
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        encode_pgm(self.width, self.height, &bytes)
    }

    pub fn from_pgm_bytes(buf: &[u8]) -> Result<Self> {
        let (w, h, px) = decode_pgm(buf)?;
        Ok(Self {
            height: h,
            width: w,
            data: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_pgm_bytes())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&buf)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_degenerate(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        !self.is_degenerate() && self.x1 as usize <= width && self.y1 as usize <= height
    }

    #[inline]
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&x) && (self.y0 as usize..self.y1 as usize).contains(&y)
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// Boolean raster; a set bit marks a pixel to inpaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::arg(format!(
                "mask has {} bits, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// Mask with exactly the pixels of `bbox` set (clipped to the raster).
    pub fn from_bbox(height: usize, width: usize, bbox: &BBox) -> Self {
        let mut m = Self::zeros(height, width);
        let y1 = (bbox.y1 as usize).min(height);
        let x1 = (bbox.x1 as usize).min(width);
        for y in (bbox.y0 as usize)..y1 {
            for x in (bbox.x0 as usize)..x1 {
                m.set(y, x, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// True iff every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let px: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_pgm(self.width, self.height, &px)
    }

    /// Any nonzero pixel counts as set.
    pub fn from_pgm_bytes(buf: &[u8]) -> Result<Self> {
        let (w, h, px) = decode_pgm(buf)?;
        Ok(Self {
            height: h,
            width: w,
            bits: px.iter().map(|&b| b != 0).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_pgm_bytes())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&buf)
    }
}

fn encode_pgm(width: usize, height: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, &[u8])> {
    let mut pos = 0usize;
    let mut fields = [0usize; 3];
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(Error::Format {
            offset: 0,
            msg: "not a binary graymap (missing P5 magic)".into(),
        });
    }
    pos += 2;
    for field in &mut fields {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                msg: "expected an integer in graymap header".into(),
            });
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                msg: "header integer out of range".into(),
            })?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("only 8-bit graymaps are supported (maxval {maxval})"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format {
            offset: pos as u64,
            msg: "missing whitespace after graymap header".into(),
        });
    }
    pos += 1;
    let need = w * h;
    if buf.len() - pos < need {
        return Err(Error::Format {
            offset: buf.len() as u64,
            msg: format!("truncated raster: expected {need} bytes"),
        });
    }
    Ok((w, h, &buf[pos..pos + need]))
}
