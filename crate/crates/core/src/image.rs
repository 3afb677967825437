//! Single-channel image buffer with values in [0, 1].
//!
//! PNG ingestion accepts 8- and 16-bit grayscale; everything else in the
//! pipeline works on `ImageBuf<F>`.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        source: image::ImageError,
    },
    #[error("unsupported pixel format for {path}; expected 8- or 16-bit grayscale PNG")]
    UnsupportedFormat { path: String },
}

/// Row-major single-channel image, pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<F> {
    width: usize,
    height: usize,
    data: Vec<F>,
}

impl<F: Real> ImageBuf<F> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![F::zero(); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), width * height, "pixel count mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    /// Decode 8-bit grayscale, mapping 0..=255 to [0, 1].
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height, "pixel count mismatch");
        let scale = F::from_f64(1.0 / 255.0);
        let data = bytes.iter().map(|&b| F::from_f64(b as f64) * scale).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    #[inline(always)]
    pub fn get(&self, x: usize, y: usize) -> F {
        self.data[y * self.width + x]
    }

    #[inline(always)]
    pub fn set(&mut self, x: usize, y: usize, v: F) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Bilinear sample at pixel coordinates (pixel centers sit at integer
    /// coordinates). Samples outside the image contribute 0.
    #[inline]
    pub fn bilinear(&self, x: f64, y: f64) -> F {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as i64;
        let y0 = y0 as i64;

        let fetch = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.data[yi as usize * self.width + xi as usize].as_f64()
            }
        };

        let v00 = fetch(x0, y0);
        let v10 = fetch(x0 + 1, y0);
        let v01 = fetch(x0, y0 + 1);
        let v11 = fetch(x0 + 1, y0 + 1);
        let top = v00 * (1.0 - fx) + v10 * fx;
        let bot = v01 * (1.0 - fx) + v11 * fx;
        F::from_f64(top * (1.0 - fy) + bot * fy)
    }

    /// Bilinear resize to (out_w, out_h), sampling output pixel centers.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Self {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        Self::from_fn(out_w, out_h, |x, y| {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            self.bilinear(src_x, src_y)
        })
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        let n = self.data.len().max(1);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>()
            / n as f64
    }

    /// Load an 8- or 16-bit grayscale PNG, normalizing to [0, 1].
    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|source| ImageError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let (buf, max) = match img {
            DynamicImage::ImageLuma8(b) => {
                let (w, h) = b.dimensions();
                let data: Vec<f64> = b.into_raw().into_iter().map(|v| v as f64).collect();
                ((w, h, data), 255.0)
            }
            DynamicImage::ImageLuma16(b) => {
                let (w, h) = b.dimensions();
                let data: Vec<f64> = b.into_raw().into_iter().map(|v| v as f64).collect();
                ((w, h, data), 65535.0)
            }
            _ => {
                return Err(ImageError::UnsupportedFormat {
                    path: path.display().to_string(),
                })
            }
        };
        let (w, h, raw) = buf;
        let data = raw.into_iter().map(|v| F::from_f64(v / max)).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Quantize to 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let buf = self.to_u8();
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, buf)
                .expect("buffer size matches dimensions");
        img.save(path).map_err(|source| ImageError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_integer_coords_is_exact() {
        let img = ImageBuf::<f64>::from_fn(4, 3, |x, y| (x + 10 * y) as f64 / 50.0);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(img.bilinear(x as f64, y as f64), img.get(x, y));
            }
        }
    }

    #[test]
    fn bilinear_outside_is_zero() {
        let img = ImageBuf::<f32>::from_fn(4, 4, |_, _| 1.0);
        assert_eq!(img.bilinear(-2.0, 1.0), 0.0);
        assert_eq!(img.bilinear(1.0, 5.0), 0.0);
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let img = ImageBuf::<f32>::from_fn(8, 6, |x, y| ((x * y) % 7) as f32 / 7.0);
        let same = img.resize(8, 6);
        assert_eq!(img, same);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageBuf::<f64>::from_fn(10, 10, |_, _| 0.42);
        let small = img.resize(4, 7);
        for &v in small.as_slice() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = ImageBuf::<f32>::from_fn(16, 12, |x, y| ((x + y) % 5) as f32 / 4.0);
        img.save_png(&path).unwrap();
        let back = ImageBuf::<f32>::load_png(&path).unwrap();
        assert_eq!(back.width(), 16);
        assert_eq!(back.height(), 12);
        assert!(img.mean_abs_diff(&back) < 1.0 / 255.0);
    }
}
