//! 8-bit grayscale images and binary PGM (`P5`) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer size");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// `w×h` window with top-left corner at `(x0, y0)`. Panics when the
    /// window leaves the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> GrayImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut px = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            px.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        GrayImage::new(w, h, px)
    }

    /// Box-mean downsampling by an integer `factor`, rounding half up.
    pub fn box_downsample(&self, factor: usize) -> GrayImage {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0);
        let (w, h) = (self.width / factor, self.height / factor);
        let area = (factor * factor) as u32;
        let mut px = Vec::with_capacity(w * h);
        for by in 0..h {
            for bx in 0..w {
                let mut s = 0u32;
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        s += self.get(x, y) as u32;
                    }
                }
                px.push(((s + area / 2) / area) as u8);
            }
        }
        GrayImage::new(w, h, px)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(err(0, "not a binary PGM (missing P5 magic)"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // whitespace and '#' comments between header tokens
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(err(pos, "expected a header number"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| err(start, "header number out of range"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(err(pos, "only maxval 255 is supported"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err(pos, "missing whitespace after header"));
        }
        pos += 1;
        let need = width * height;
        if bytes.len() - pos != need {
            return Err(err(
                pos,
                &format!("expected {need} pixel bytes, found {}", bytes.len() - pos),
            ));
        }
        Ok(GrayImage::new(width, height, bytes[pos..].to_vec()))
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes, path)
    }
}
