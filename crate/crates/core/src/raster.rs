//! Minimal interleaved 8-bit raster used for fisheye frames, patches and composites.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        assert!(channels > 0, "raster needs at least one channel");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Builds a single-channel raster by evaluating `f(x, y)` at every pixel.
    pub fn from_fn_gray(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn row_stride(&self) -> usize {
        self.width * self.channels
    }

    /// Copies `src` into this raster with its top-left corner at (`x0`, `y0`).
    pub fn blit(&mut self, src: &Raster, x0: usize, y0: usize) -> Result<()> {
        if src.channels != self.channels || x0 + src.width > self.width || y0 + src.height > self.height {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}x{} fitting at ({x0},{y0})", src.width, src.height, self.channels),
                actual: format!("{}x{}x{}", self.width, self.height, self.channels),
            });
        }
        let n = src.row_stride();
        for row in 0..src.height {
            let dst = ((y0 + row) * self.width + x0) * self.channels;
            self.data[dst..dst + n].copy_from_slice(&src.data[row * n..(row + 1) * n]);
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Ok(match img {
            DynamicImage::ImageLuma8(g) => Self::from_gray(g),
            other => Self::from_rgb(other.to_rgb8()),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let img = match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.data.clone()).expect("buffer size")),
            3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.data.clone()).expect("buffer size")),
            c => return Err(Error::Data(format!("cannot write a {c}-channel raster as PNG"))),
        };
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    fn from_gray(g: GrayImage) -> Self {
        let (w, h) = g.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            channels: 1,
            data: g.into_raw(),
        }
    }

    fn from_rgb(c: RgbImage) -> Self {
        let (w, h) = c.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: c.into_raw(),
        }
    }
}
