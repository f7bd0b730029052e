//! Single-channel 8-bit rasters.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use sha2::{Digest, Sha256};

/// Square greyscale image, row-major, one byte per pixel.
///
/// Pixels are stored quantized to 8 bits and read back normalized to `[0, 1]`.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    side: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("side", &self.side)
            .field("digest", &self.digest())
            .finish()
    }
}

impl Raster {
    /// A raster filled with a constant normalized value.
    pub fn filled(side: usize, value: f32) -> Self {
        Self {
            side,
            pixels: vec![quantize(value); side * side],
        }
    }

    pub fn from_normalized(side: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), side * side, "raster buffer size");
        Self {
            side,
            pixels: values.iter().copied().map(quantize).collect(),
        }
    }

    pub fn from_bytes(side: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), side * side, "raster buffer size");
        Self { side, pixels }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.side + x] as f32 / 255.0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    /// Hex SHA-256 of the pixel bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.pixels))
    }

    /// Encodes as a binary PGM (P5) document.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.pixels, self.side as u32, self.side as u32, ExtendedColorType::L8)
            .expect("in-memory PGM encoding");
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, image::ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?.into_luma8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(image::ImageError::Parameter(
                image::error::ParameterError::from_kind(
                    image::error::ParameterErrorKind::DimensionMismatch,
                ),
            ));
        }
        Ok(Self {
            side: w as usize,
            pixels: img.into_raw(),
        })
    }

    pub fn save_pgm(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_pgm())
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let values: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let r = Raster::from_normalized(8, &values);
        let back = Raster::from_pgm(&r.to_pgm()).unwrap();
        assert_eq!(r, back);
        assert!(r.to_pgm().starts_with(b"P5"));
    }

    #[test]
    fn quantization_is_8_bit() {
        let r = Raster::filled(2, 0.5);
        assert_eq!(r.bytes(), &[128, 128, 128, 128]);
        assert!((r.get(1, 1) - 128.0 / 255.0).abs() < 1e-6);
    }
}
