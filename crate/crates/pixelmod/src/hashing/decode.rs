use image::ImageReader;
use std::io::Cursor;

use super::HashError;

/// Smallest accepted width or height.
pub const MIN_DIMENSION: u32 = 16;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LuminancePlane {
    width: u32,
    height: u32,
    samples: Vec<u8>,
}

impl LuminancePlane {
    pub fn new(width: u32, height: u32, samples: Vec<u8>) -> Result<Self, HashError> {
        if width < MIN_DIMENSION || height < MIN_DIMENSION {
            return Err(HashError::TooSmall { width, height });
        }
        if samples.len() != width as usize * height as usize {
            return Err(HashError::PlaneShape {
                width,
                height,
                len: samples.len(),
            });
        }
        Ok(LuminancePlane {
            width,
            height,
            samples,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.samples[y as usize * self.width as usize + x as usize]
    }
}

/// Decodes a PNG or JPEG into a luminance plane.
///
/// Alpha is composited over white, then luma is `0.299R + 0.587G + 0.114B`
/// rounded half-up. The arithmetic is done in integers so the result does
/// not depend on float rounding.
pub fn decode_image(bytes: &[u8]) -> Result<LuminancePlane, HashError> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| HashError::Decode(e.to_string()))?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Jpeg) => {}
        Some(other) => return Err(HashError::Decode(format!("unsupported format {other:?}"))),
        None => return Err(HashError::Decode("unrecognized image format".into())),
    }
    let img = reader
        .decode()
        .map_err(|e| HashError::Decode(e.to_string()))?;
    let (width, height) = (img.width(), img.height());
    if width < MIN_DIMENSION || height < MIN_DIMENSION {
        return Err(HashError::TooSmall { width, height });
    }
    let rgba = img.to_rgba8();
    let samples = rgba
        .pixels()
        .map(|p| luma_over_white(p[0], p[1], p[2], p[3]))
        .collect();
    LuminancePlane::new(width, height, samples)
}

#[inline]
fn luma_over_white(r: u8, g: u8, b: u8, a: u8) -> u8 {
    let a = a as u64;
    let comp = |c: u8| c as u64 * a + 255 * (255 - a);
    let num = 299 * comp(r) + 587 * comp(g) + 114 * comp(b);
    ((num + 127_500) / 255_000) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageFormat, Rgba, RgbaImage};

    fn png(img: &RgbaImage) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn one_pixel_is_too_small() {
        let bytes = png(&RgbaImage::from_pixel(1, 1, Rgba([0, 0, 0, 255])));
        assert!(matches!(decode_image(&bytes), Err(HashError::TooSmall { .. })));
    }

    #[test]
    fn solid_white_is_all_255() {
        let bytes = png(&RgbaImage::from_pixel(64, 64, Rgba([255, 255, 255, 255])));
        let plane = decode_image(&bytes).unwrap();
        assert_eq!((plane.width(), plane.height()), (64, 64));
        assert!(plane.samples().iter().all(|&v| v == 255));
    }

    #[test]
    fn pure_red_maps_to_76() {
        assert_eq!(luma_over_white(255, 0, 0, 255), 76);
        let bytes = png(&RgbaImage::from_pixel(16, 16, Rgba([255, 0, 0, 255])));
        assert!(decode_image(&bytes).unwrap().samples().iter().all(|&v| v == 76));
    }

    #[test]
    fn transparent_pixels_become_white() {
        assert_eq!(luma_over_white(0, 0, 0, 0), 255);
        // half-covered black lands half way
        assert_eq!(luma_over_white(0, 0, 0, 128), 127);
    }

    #[test]
    fn garbage_is_a_decode_error() {
        assert!(matches!(decode_image(b"not an image"), Err(HashError::Decode(_))));
        assert!(matches!(decode_image(&[]), Err(HashError::Decode(_))));
    }

    #[test]
    fn gray_values_survive_exactly() {
        for v in 0..=255u8 {
            assert_eq!(luma_over_white(v, v, v, 255), v);
        }
    }
}
