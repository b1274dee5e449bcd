//! Grayscale images and binary portable graymap (`P5`, maxval 255) I/O.

use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Row-major grayscale image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        ensure!(width * height == pixels.len(), "{width}x{height} image needs {} pixels, got {}", width * height, pixels.len());
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn clamped(mut self) -> Self {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Images placed side by side, left to right. All must share a height.
    pub fn hstack(images: &[GrayImage]) -> Result<Self> {
        ensure!(!images.is_empty(), "hstack of no images");
        let height = images[0].height;
        ensure!(images.iter().all(|i| i.height == height), "hstack: images differ in height");
        let width: usize = images.iter().map(|i| i.width).sum();
        let mut out = Self::filled(width, height, 0.0);
        let mut x0 = 0;
        for img in images {
            for y in 0..height {
                for x in 0..img.width {
                    out.set(x0 + x, y, img.get(x, y));
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }

    /// 8-bit quantization, round half up.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.pixels
            .iter()
            .map(|&v| {
                ensure!((0.0..=1.0).contains(&v), "pixel value {v} outside [0, 1]");
                Ok((v as f64 * 255.0 + 0.5).floor() as u8)
            })
            .collect()
    }

    pub fn encode_pgm(&self) -> Result<Vec<u8>> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes()?);
        Ok(out)
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(Error::Format { offset: 0, message: "not a binary graymap (expected magic P5)".into() });
        }
        cur.pos = 2;
        let width = cur.header_number("width")?;
        let height = cur.header_number("height")?;
        let maxval = cur.header_number("maxval")?;
        if maxval != 255 {
            return Err(Error::Format { offset: cur.pos, message: format!("unsupported maxval {maxval}, expected 255") });
        }
        // exactly one whitespace byte separates the header from the raster
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(Error::Format { offset: cur.pos, message: "missing whitespace after header".into() });
        }
        cur.pos += 1;
        let need = width * height;
        let have = bytes.len() - cur.pos;
        if have < need {
            return Err(Error::Format { offset: bytes.len(), message: format!("truncated raster: {have} of {need} bytes") });
        }
        let pixels = bytes[cur.pos..cur.pos + need].iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(width, height, pixels)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_pgm()?)?;
        Ok(())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_pgm(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn header_number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::Format { offset: self.pos, message: format!("expected whitespace before {what}") });
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format { offset: start, message: format!("expected decimal {what}") });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::Format { offset: start, message: format!("invalid {what}") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_gray_quantizes_up() {
        let img = GrayImage::filled(3, 2, 0.5);
        assert_eq!(img.to_bytes().unwrap(), vec![128; 6]);
    }

    #[test]
    fn round_trip_within_one_level() {
        let px: Vec<f32> = (0..48).map(|i| (i as f32 * 0.173).sin().abs()).collect();
        let img = GrayImage::new(8, 6, px).unwrap();
        let back = GrayImage::decode_pgm(&img.encode_pgm().unwrap()).unwrap();
        assert_eq!((back.width(), back.height()), (8, 6));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn header_comments_accepted() {
        let mut bytes = b"P5 # made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let img = GrayImage::decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_magic_rejected() {
        let err = GrayImage::decode_pgm(b"P6\n1 1\n255\n\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_raster_reports_offset() {
        let bytes = b"P5\n4 4\n255\n\x01\x02".to_vec();
        match GrayImage::decode_pgm(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, bytes.len()),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_dimension_reports_offset() {
        match GrayImage::decode_pgm(b"P5\nx 4\n255\n").unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn out_of_range_pixel_not_written() {
        assert!(GrayImage::filled(1, 1, 1.5).encode_pgm().is_err());
    }
}
