//! 8-bit RGB images and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::Input(format!(
                "{h}x{w} RGB image needs {} bytes, got {}",
                h * w * 3,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [u8; 3]) -> Self {
        Self {
            h,
            w,
            data: rgb.repeat(h * w),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_empty(&self) -> bool {
        self.h == 0 || self.w == 0
    }

    /// Outline of `[x1, y1, x2, y2]` with the given line width, clipped to
    /// the image.
    pub fn draw_rect(&mut self, bbox: [f32; 4], thickness: usize, rgb: [u8; 3]) {
        if self.is_empty() {
            return;
        }
        let clip = |v: f32, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
        let (x1, x2) = (clip(bbox[0], self.w), clip(bbox[2], self.w));
        let (y1, y2) = (clip(bbox[1], self.h), clip(bbox[3], self.h));
        let t = thickness.max(1);
        for y in y1..=y2 {
            for x in x1..=x2 {
                let edge = y < y1 + t || y + t > y2 || x < x1 + t || x + t > x2;
                if edge {
                    self.set_pixel(y, x, rgb);
                }
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Input(format!("not a binary PPM: {msg}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments
            while pos < bytes.len() {
                match bytes[pos] {
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    c if c.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("magic is not P6"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let need = h * w * 3;
        let raster = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
        Self::new(h, w, raster.to_vec())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    /// Deterministic pseudo-random image (for tests and benchmarks).
    pub fn synthetic(h: usize, w: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0u8; h * w * 3];
        rng.fill(&mut data[..]);
        Self { h, w, data }
    }
}
