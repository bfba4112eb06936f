//! Image and feature-map containers plus the binary feature-map file format.

use std::io::{Read, Write};
use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, Rgb32FImage, RgbImage};

use crate::error::{AsdaError, Result};

pub const MIN_IMAGE_SIDE: usize = 16;

const FEATURE_MAGIC: &[u8; 7] = b"ASDAFM1";

/// RGB image with channel values in [0, 1], stored row-major as (y, x, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(AsdaError::ImageTooSmall {
                height,
                width,
                min: MIN_IMAGE_SIDE,
            });
        }
        if data.len() != height * width * 3 {
            return Err(AsdaError::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(AsdaError::InvalidImage(format!(
                "value {v} outside [0, 1]"
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear resize by `scale`. A scale of exactly 1 returns a clone.
    pub fn rescaled(&self, scale: f64) -> Result<ImageTensor> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(AsdaError::Invalid(format!("invalid scale {scale}")));
        }
        if scale == 1.0 {
            return Ok(self.clone());
        }
        let h = ((self.height as f64) * scale).round() as usize;
        let w = ((self.width as f64) * scale).round() as usize;
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(AsdaError::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_IMAGE_SIDE,
            });
        }
        let src = Rgb32FImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb([p[0] as f32, p[1] as f32, p[2] as f32])
        });
        let dst = image::imageops::resize(&src, w as u32, h as u32, FilterType::Triangle);
        let data = dst
            .pixels()
            .flat_map(|p| p.0.map(|v| (v as f64).clamp(0.0, 1.0)))
            .collect();
        ImageTensor::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(|v| (v * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|v| v as f64 / 255.0))
            .collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// H×W×C activation grid, row-major (y, x, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(AsdaError::ShapeMismatch(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(AsdaError::ShapeMismatch(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AsdaError::NonFinite {
                stage: "feature map",
            });
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        FeatureMap {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::from_raw(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel vector at cell (y, x).
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(FEATURE_MAGIC)?;
        for dim in [self.height, self.width, self.channels] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        input.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(AsdaError::Format("not a feature-map file (bad magic)".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut buf = [0u8; 4];
            input.read_exact(&mut buf)?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        let [h, w, c] = dims;
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| AsdaError::Format("feature-map dims overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        FeatureMap::new(h, w, c, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
