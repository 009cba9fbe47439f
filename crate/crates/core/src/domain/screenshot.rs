use std::fmt;
use std::io::Cursor;
use std::sync::Arc;

use image::{ImageFormat, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScreenshotError {
    #[error("raster of {len} bytes does not match {width}x{height} RGB")]
    BadRaster { width: u32, height: u32, len: usize },
    #[error("screenshot dimensions must be positive")]
    Empty,
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self([r, g, b])
    }

    /// Parses `#rrggbb`.
    pub fn from_hex(s: &str) -> Option<Self> {
        let hex = s.strip_prefix('#')?;
        if hex.len() != 6 {
            return None;
        }
        let n = u32::from_str_radix(hex, 16).ok()?;
        Some(Self::new((n >> 16) as u8, (n >> 8) as u8, n as u8))
    }
}

/// Row-major RGB raster. Cloning shares the pixel buffer.
#[derive(Clone, PartialEq, Eq)]
pub struct Screenshot {
    width: u32,
    height: u32,
    pixels: Arc<[u8]>,
    /// Monotonic milliseconds on the capturing session's clock.
    pub captured_at: u64,
    pub step_index: usize,
}

impl fmt::Debug for Screenshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Screenshot")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("captured_at", &self.captured_at)
            .field("step_index", &self.step_index)
            .finish_non_exhaustive()
    }
}

impl Screenshot {
    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ScreenshotError> {
        if width == 0 || height == 0 {
            return Err(ScreenshotError::Empty);
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(ScreenshotError::BadRaster { width, height, len: pixels.len() });
        }
        Ok(Self { width, height, pixels: pixels.into(), captured_at: 0, step_index: 0 })
    }

    pub fn solid(width: u32, height: u32, color: Rgb) -> Self {
        let pixels = color.0.repeat(width as usize * height as usize);
        Self::from_raw(width, height, pixels).expect("solid raster has the right size")
    }

    pub fn with_meta(mut self, captured_at: u64, step_index: usize) -> Self {
        self.captured_at = captured_at;
        self.step_index = step_index;
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        Rgb([self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]])
    }

    pub fn same_dimensions(&self, other: &Screenshot) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_png(&self) -> Vec<u8> {
        let img = RgbImage::from_raw(self.width, self.height, self.pixels.to_vec())
            .expect("raster length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).expect("in-memory png encoding");
        out.into_inner()
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, ScreenshotError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_raw(w, h, img.into_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_length_is_checked() {
        assert!(matches!(Screenshot::from_raw(2, 2, vec![0; 11]), Err(ScreenshotError::BadRaster { .. })));
        assert!(matches!(Screenshot::from_raw(0, 2, vec![]), Err(ScreenshotError::Empty)));
    }

    #[test]
    fn png_round_trip() {
        let mut px = vec![0u8; 5 * 3 * 3];
        px[7] = 200;
        let s = Screenshot::from_raw(5, 3, px).unwrap();
        let back = Screenshot::from_png(&s.to_png()).unwrap();
        assert_eq!(back.pixels(), s.pixels());
    }

    #[test]
    fn hex_colors() {
        assert_eq!(Rgb::from_hex("#ff8000"), Some(Rgb::new(255, 128, 0)));
        assert_eq!(Rgb::from_hex("ff8000"), None);
    }
}
