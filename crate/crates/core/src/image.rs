//! Single-channel images with values in `[0, 1]`.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Image(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// Quantize to 8 bits and write a binary PGM.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        let file = std::fs::File::create(path)?;
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&bytes, self.width as u32, self.height as u32, ExtendedColorType::L8)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Load any grayscale PNM and normalize by 255.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    /// One of the eight symmetries of the square: `k & 3` quarter turns
    /// clockwise, then a left-right mirror when `k & 4` is set.
    pub fn dihedral(&self, k: u8) -> Self {
        let turns = k & 3;
        let (h, w) = if turns % 2 == 1 {
            (self.width, self.height)
        } else {
            (self.height, self.width)
        };
        let mut out = Self::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let m = if k & 4 != 0 { w - 1 - x } else { x };
                let (sy, sx) = match turns {
                    0 => (y, m),
                    1 => (self.height - 1 - m, y),
                    2 => (self.height - 1 - y, self.width - 1 - m),
                    _ => (m, self.width - 1 - y),
                };
                out.pixels[y * w + x] = self.get(sy, sx);
            }
        }
        out
    }

    /// Rotate by `degrees` about the centre with nearest-neighbour sampling.
    /// Source coordinates falling outside are mirrored back inside.
    pub fn rotated(&self, degrees: f64) -> Self {
        let (h, w) = (self.height, self.width);
        let (s, c) = degrees.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = Self::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = (cy + c * dy - s * dx).round() as i64;
                let sx = (cx + s * dy + c * dx).round() as i64;
                out.pixels[y * w + x] = self.get(reflect(sy, h), reflect(sx, w));
            }
        }
        out
    }

    /// Values after an 8-bit store/load cycle.
    pub fn quantized_8bit(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage::new(2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        img.save_pgm(&path).unwrap();
        let back = GrayImage::load_pgm(&path).unwrap();
        assert_eq!(back, img.quantized_8bit());
        assert_eq!((back.height, back.width), (2, 3));
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"));
    }

    #[test]
    fn dihedral_group() {
        // 1 2 3
        // 4 5 6
        let img = GrayImage::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cw = img.dihedral(1);
        assert_eq!((cw.height, cw.width), (3, 2));
        assert_eq!(cw.pixels, vec![4.0, 1.0, 5.0, 2.0, 6.0, 3.0]);
        assert_eq!(img.dihedral(2).pixels, vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(img.dihedral(4).pixels, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(img.dihedral(1).dihedral(3), img);
        assert_eq!(img.dihedral(0), img);
        let mut all: Vec<Vec<u32>> = (0..8).map(|k| img.dihedral(k).pixels.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn rotation_matches_quarter_turns() {
        let img = GrayImage::new(4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(img.rotated(0.0), img);
        assert_eq!(img.rotated(90.0), img.dihedral(1));
        assert_eq!(img.rotated(180.0), img.dihedral(2));
        assert_eq!(img.rotated(-90.0), img.dihedral(3));
        let r = img.rotated(45.0);
        assert!(r.pixels.iter().all(|v| img.pixels.contains(v)));
    }
}
