//! Image-domain types and PNG I/O.
//!
//! Internal convention: square RGB rasters stored channel-major (CHW) as
//! `f64` in [-1, 1]. File I/O maps 8-bit [0, 255] linearly via
//! `v = byte / 127.5 - 1`; emit-side clamping happens only here, never
//! inside loss computation.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, ImageEncoder, ImageReader};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Square RGB image tensor, values in [-1, 1], CHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    side: usize,
    data: Vec<f64>,
}

/// A watermark image; same layout as [`ImageTensor`].
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkImage(pub ImageTensor);

impl WatermarkImage {
    pub fn as_image(&self) -> &ImageTensor {
        &self.0
    }
}

impl ImageTensor {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * side * side {
            return Err(Error::shape(format!(
                "image data length {} != 3*{side}*{side}",
                data.len()
            )));
        }
        Ok(ImageTensor { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        ImageTensor {
            side,
            data: vec![0.0; 3 * side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.side + y) * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.side + y) * self.side + x] = v;
    }

    /// All values finite and inside [-1, 1].
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> ImageTensor {
        ImageTensor {
            side: self.side,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    /// Decode from interleaved RGB8 rows.
    pub fn from_rgb8(side: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * side * side {
            return Err(Error::shape("rgb8 buffer size mismatch".to_string()));
        }
        let mut data = vec![0.0; 3 * side * side];
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    let v = bytes[(y * side + x) * 3 + c] as f64 / 127.5 - 1.0;
                    data[(c * side + y) * side + x] = v;
                }
            }
        }
        Ok(ImageTensor { side, data })
    }

    /// Encode to interleaved RGB8 rows (values clamped then quantized).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let side = self.side;
        let mut out = vec![0u8; 3 * side * side];
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    let v = self.get(c, y, x).clamp(-1.0, 1.0);
                    out[(y * side + x) * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
                }
            }
        }
        out
    }

    /// Bilinear resample to a new square side. Identity when sides match.
    pub fn resize_bilinear(&self, new_side: usize) -> ImageTensor {
        if new_side == self.side {
            return self.clone();
        }
        let mut out = ImageTensor::zeros(new_side);
        let scale = self.side as f64 / new_side as f64;
        let max = (self.side - 1) as f64;
        for y in 0..new_side {
            let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.side - 1);
            let fy = sy - y0 as f64;
            for x in 0..new_side {
                let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.side - 1);
                let fx = sx - x0 as f64;
                for c in 0..3 {
                    let v00 = self.get(c, y0, x0);
                    let v01 = self.get(c, y0, x1);
                    let v10 = self.get(c, y1, x0);
                    let v11 = self.get(c, y1, x1);
                    let v = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }

    /// Exact counter-clockwise 90-degree rotation.
    pub fn rot90(&self) -> ImageTensor {
        let side = self.side;
        let mut out = ImageTensor::zeros(side);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    out.set(c, side - 1 - x, y, self.get(c, y, x));
                }
            }
        }
        out
    }

    /// Centered crop to `crop_side`, no resampling.
    pub fn center_crop(&self, crop_side: usize) -> Result<ImageTensor> {
        if crop_side == 0 || crop_side > self.side {
            return Err(Error::domain(format!(
                "crop side {crop_side} outside 1..={}",
                self.side
            )));
        }
        let off = (self.side - crop_side) / 2;
        let mut out = ImageTensor::zeros(crop_side);
        for c in 0..3 {
            for y in 0..crop_side {
                for x in 0..crop_side {
                    out.set(c, y, x, self.get(c, y + off, x + off));
                }
            }
        }
        Ok(out)
    }

    /// Per-pixel luma in [0, 1], used by the registry image embedder.
    pub fn luma01(&self) -> Vec<f64> {
        let side = self.side;
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let r = (self.get(0, y, x) + 1.0) / 2.0;
                let g = (self.get(1, y, x) + 1.0) / 2.0;
                let b = (self.get(2, y, x) + 1.0) / 2.0;
                out[y * side + x] = 0.299 * r + 0.587 * g + 0.114 * b;
            }
        }
        out
    }
}

/// Encode an image as PNG bytes (lossless RGB8).
pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let side = img.side() as u32;
    let mut buf = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(Cursor::new(&mut buf));
    enc.write_image(&img.to_rgb8(), side, side, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(format!("png encode: {e}")))?;
    Ok(buf)
}

/// SHA-256 hex digest of a byte buffer; this is the ledger `digest` field.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Load an 8-bit RGB raster, resample to `resolution`, map to [-1, 1].
///
/// Non-RGB color types are rejected rather than silently converted.
pub fn load_image(path: impl AsRef<Path>, resolution: usize) -> Result<ImageTensor> {
    if resolution == 0 {
        return Err(Error::domain("resolution must be positive".to_string()));
    }
    let reader = ImageReader::open(path.as_ref())?
        .with_guessed_format()
        .map_err(Error::Io)?;
    let img = reader
        .decode()
        .map_err(|e| Error::format(format!("decode {}: {e}", path.as_ref().display())))?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::format(format!(
            "expected 8-bit RGB, got {:?}",
            img.color()
        )));
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    // Non-square sources are legal; resampling targets a square raster.
    let side = w.min(h) as usize;
    let mut square = ImageTensor::zeros(side);
    let ox = (w as usize - side) / 2;
    let oy = (h as usize - side) / 2;
    for y in 0..side {
        for x in 0..side {
            let p = rgb.get_pixel((x + ox) as u32, (y + oy) as u32);
            for c in 0..3 {
                square.set(c, y, x, p.0[c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(square.resize_bilinear(resolution))
}

/// Write a lossless 8-bit RGB PNG; returns the content digest of the
/// exact bytes written.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<String> {
    let bytes = encode_png(img)?;
    std::fs::write(path.as_ref(), &bytes)?;
    Ok(digest_bytes(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn value_mapping_endpoints() {
        let img = ImageTensor::from_rgb8(1, &[255, 0, 128]).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 0), -1.0);
        assert!((img.get(2, 0, 0) - (128.0 / 127.5 - 1.0)).abs() < 1e-12);
        assert!((img.get(2, 0, 0) - 0.00392).abs() < 1e-4);
    }

    #[test]
    fn value_one_stores_byte_255() {
        let mut img = ImageTensor::zeros(2);
        img.set(0, 0, 0, 1.0);
        assert_eq!(img.to_rgb8()[0], 255);
    }

    #[test]
    fn save_load_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut rng = crate::rng::SeedRng::new(11, 0);
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let img = ImageTensor::new(16, data).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path, 16).unwrap();
        // 1/255 of the [-1,1] range.
        let tol = 2.0 / 255.0;
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_tensors_share_digests() {
        let dir = tempdir().unwrap();
        let img = ImageTensor::zeros(8);
        let d1 = save_image(&img, dir.path().join("a.png")).unwrap();
        let d2 = save_image(&img, dir.path().join("b.png")).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn resize_shape_contract_and_identity() {
        let mut rng = crate::rng::SeedRng::new(5, 0);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let img = ImageTensor::new(32, data).unwrap();
        assert_eq!(img.resize_bilinear(8).side(), 8);
        let same = img.resize_bilinear(32);
        assert_eq!(same, img);
    }

    #[test]
    fn load_resizes_to_requested_resolution() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.png");
        save_image(&ImageTensor::zeros(64), &path).unwrap();
        let small = load_image(&path, 32).unwrap();
        assert_eq!(small.side(), 32);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let mut rng = crate::rng::SeedRng::new(9, 0);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.normal()).collect();
        let img = ImageTensor::new(8, data).unwrap();
        let r4 = img.rot90().rot90().rot90().rot90();
        assert_eq!(img, r4);
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_image("/nonexistent/nope.png", 8).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
