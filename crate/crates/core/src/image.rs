//! RGB images with values in `[0, 1]`, plus PNG/JPEG ingest and PNG export.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// An `H × W` RGB image stored row-major, interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fills the pixels selected by `mask` with a constant colour.
    pub fn paint(&mut self, mask: &Mask, rgb: [f64; 3]) {
        for (y, x) in mask.iter_set() {
            self.set_pixel(y, x, rgb);
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path.as_ref(), ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(self.to_rgb8()).write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Checks both sides are divisible by the backend's latent downscale factor.
    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        if factor == 0
            || !self.height.is_multiple_of(factor)
            || !self.width.is_multiple_of(factor)
            || self.height == 0
        {
            return Err(Error::InvalidEdit(format!(
                "image {}x{} is not divisible by the latent downscale factor {factor}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

impl Mask {
    /// Single-channel ingest: any nonzero luma value is set.
    pub fn from_gray8(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v != 0).collect();
        Mask::from_vec(h as usize, w as usize, data).expect("buffer length matches dimensions")
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self
            .as_slice()
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect();
        GrayImage::from_raw(self.width() as u32, self.height() as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_gray8(&image::open(path.as_ref())?.to_luma8()))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_gray8(
            &image::load_from_memory(bytes)?.to_luma8(),
        ))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8()
            .save_with_format(path.as_ref(), ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(self.to_gray8()).write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}
