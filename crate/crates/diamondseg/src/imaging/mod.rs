//! Image and mask containers shared by every stage of the toolkit.
//!
//! Masks are class-index rasters with exactly four classes:
//! 0 background, 1 pocket holder, 2 diamond top facet, 3 diamond side facets.
//! On disk they are indexed-color PNGs so class identity survives round trips
//! bit-exactly; [`PALETTE`] fixes the display color of each class.

mod manifest;
mod png_io;

pub use manifest::{
    read_dataset, write_dataset, ImageData, Manifest, ManifestEntry, Sample, SplitTag,
};
pub use png_io::{decode_image_png, decode_mask_png, encode_image_png, encode_mask_png};

use thiserror::Error;

/// Number of segmentation classes. Fixed by the labeling convention.
pub const NUM_CLASSES: usize = 4;

/// Display palette, indexed by class: background black, pocket holder red,
/// diamond top pink, diamond sides green.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [[0, 0, 0], [255, 0, 0], [255, 105, 180], [0, 255, 0]];

/// Minimum edge length for image rasters. Smaller frames carry no usable
/// field of interest and are rejected at construction.
pub const MIN_IMAGE_EDGE: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid dimensions {h}x{w}x{channels}")]
    InvalidDimensions { h: usize, w: usize, channels: usize },
    #[error("mask value {value} at index {index} exceeds class range 0..={}", NUM_CLASSES - 1)]
    ClassOutOfRange { index: usize, value: u8 },
    #[error("malformed png: {0}")]
    MalformedPng(String),
    #[error("png palette or pixel index outside the {NUM_CLASSES}-class range")]
    TooManyClasses,
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("duplicate sample id: {0}")]
    DuplicateId(String),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ImagingError {
    fn from(e: std::io::Error) -> Self {
        ImagingError::Io(e.to_string())
    }
}

/// 8-bit raster with 1 (grayscale) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageU8 {
    h: usize,
    w: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if h < MIN_IMAGE_EDGE || w < MIN_IMAGE_EDGE || (channels != 1 && channels != 3) {
            return Err(ImagingError::InvalidDimensions { h, w, channels });
        }
        if data.len() != h * w * channels {
            return Err(ImagingError::DimensionMismatch(format!(
                "buffer length {} != {}x{}x{}",
                data.len(),
                h,
                w,
                channels
            )));
        }
        Ok(Self { h, w, channels, data })
    }

    pub fn zeros(h: usize, w: usize, channels: usize) -> Result<Self, ImagingError> {
        Self::new(h, w, channels, vec![0; h * w * channels])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> u8 {
        self.data[(r * self.w + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: u8) {
        self.data[(r * self.w + c) * self.channels + ch] = v;
    }

    /// Mean intensity over all channels.
    pub fn mean(&self) -> f64 {
        let sum: u64 = self.data.iter().map(|&v| u64::from(v)).sum();
        sum as f64 / self.data.len() as f64
    }
}

/// Float raster, the post-normalization domain carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    h: usize,
    w: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImagingError> {
        if h < MIN_IMAGE_EDGE || w < MIN_IMAGE_EDGE || (channels != 1 && channels != 3) {
            return Err(ImagingError::InvalidDimensions { h, w, channels });
        }
        if data.len() != h * w * channels {
            return Err(ImagingError::DimensionMismatch(format!(
                "buffer length {} != {}x{}x{}",
                data.len(),
                h,
                w,
                channels
            )));
        }
        Ok(Self { h, w, channels, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.data[(r * self.w + c) * self.channels + ch]
    }
}

/// Class-index raster. Every value is a class id in `0..NUM_CLASSES`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskU8 {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl MaskU8 {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if h == 0 || w == 0 {
            return Err(ImagingError::InvalidDimensions { h, w, channels: 1 });
        }
        if data.len() != h * w {
            return Err(ImagingError::DimensionMismatch(format!(
                "buffer length {} != {}x{}",
                data.len(),
                h,
                w
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if usize::from(v) >= NUM_CLASSES {
                return Err(ImagingError::ClassOutOfRange { index: i, value: v });
            }
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self, ImagingError> {
        Self::new(h, w, vec![0; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        debug_assert!(usize::from(v) < NUM_CLASSES);
        self.data[r * self.w + c] = v;
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &v in &self.data {
            counts[usize::from(v)] += 1;
        }
        counts
    }
}

/// Rounds to the nearest integer, halves away from zero toward +inf, and
/// clamps into the u8 range. All u8 blends in the crate share this rule.
#[inline]
pub fn round_clamp_u8(x: f64) -> u8 {
    let r = (x + 0.5).floor();
    r.clamp(0.0, 255.0) as u8
}

/// Alpha-blends the palette color of each non-background mask class over the
/// image. Background pixels keep the underlying intensity. Output is RGB.
pub fn overlay(image: &ImageU8, mask: &MaskU8, alpha: f64) -> Result<ImageU8, ImagingError> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(ImagingError::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
    let (h, w) = (image.height(), image.width());
    let mut out = vec![0u8; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let class = mask.get(r, c) as usize;
            for ch in 0..3 {
                let base = if image.channels() == 1 {
                    image.get(r, c, 0)
                } else {
                    image.get(r, c, ch)
                };
                let v = if class == 0 {
                    base
                } else {
                    let color = f64::from(PALETTE[class][ch]);
                    round_clamp_u8((1.0 - alpha) * f64::from(base) + alpha * color)
                };
                out[(r * w + c) * 3 + ch] = v;
            }
        }
    }
    ImageU8::new(h, w, 3, out)
}
