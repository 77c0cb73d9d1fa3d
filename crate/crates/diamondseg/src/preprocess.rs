//! Frame-conditioning chain: temporal resampling, degenerate-frame
//! filtering, foreground crop, resize, median denoise, normalization, and
//! the train/test split.

use crate::imaging::{
    ImageData, ImageF32, ImageU8, MaskU8, Sample, SplitTag, MIN_IMAGE_EDGE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("run contains no samples")]
    EmptyRun,
    #[error("mask has no foreground pixels to crop around")]
    NoForegroundPixels,
    #[error("dataset of {n} samples is too small to split")]
    DatasetTooSmall { n: usize },
    #[error("sample {0} does not carry an 8-bit image")]
    NotEightBit(String),
    #[error("sample {0} has no mask")]
    MissingMask(String),
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
}

/// Why the sanity filter dropped a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Blackout,
    Noisy,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Blackout => "blackout",
            RejectReason::Noisy => "noisy",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Temporal resampling window in minutes.
    pub window_min: u32,
    /// Frames with mean intensity below this are blackouts.
    pub blackout_mean_max: f64,
    /// Frames whose 3x3 Laplacian response variance exceeds this are noise.
    pub laplacian_var_max: f64,
    /// Padding added around the tight foreground bounding box.
    pub crop_pad: usize,
    /// Square output resolutions; one dataset is written per entry.
    pub target_resolutions: Vec<usize>,
    pub split_test_fraction: f64,
    pub split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window_min: 15,
            blackout_mean_max: 10.0,
            laplacian_var_max: 1500.0,
            crop_pad: 8,
            target_resolutions: vec![64, 128],
            split_test_fraction: 0.10,
            split_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let err = |m: String| Err(PreprocessError::InvalidConfig(m));
        if self.window_min < 1 {
            return err("window_min must be >= 1".into());
        }
        if !(0.0 < self.split_test_fraction && self.split_test_fraction < 1.0) {
            return err(format!(
                "split_test_fraction {} outside (0, 1)",
                self.split_test_fraction
            ));
        }
        if self.target_resolutions.is_empty() {
            return err("target_resolutions must not be empty".into());
        }
        for &res in &self.target_resolutions {
            if res < MIN_IMAGE_EDGE {
                return err(format!("target resolution {res} below minimum {MIN_IMAGE_EDGE}"));
            }
        }
        Ok(())
    }
}

/// Keeps the earliest sample in each half-open window [k*w, (k+1)*w),
/// ordered by window index.
pub fn resample(run: &[Sample], window_min: u32) -> Result<Vec<Sample>, PreprocessError> {
    if run.is_empty() {
        return Err(PreprocessError::EmptyRun);
    }
    let w = window_min.max(1);
    let mut picked: Vec<&Sample> = Vec::new();
    for s in run {
        match picked.last() {
            Some(prev) if prev.timestamp_min / w == s.timestamp_min / w => {
                if s.timestamp_min < prev.timestamp_min {
                    *picked.last_mut().unwrap() = s;
                }
            }
            _ => picked.push(s),
        }
    }
    Ok(picked.into_iter().cloned().collect())
}

fn require_u8<'a>(sample: &'a Sample) -> Result<&'a ImageU8, PreprocessError> {
    sample
        .image
        .as_u8()
        .ok_or_else(|| PreprocessError::NotEightBit(sample.id.clone()))
}

pub fn image_mean(image: &ImageU8) -> f64 {
    let sum: u64 = image.data().iter().map(|&v| u64::from(v)).sum();
    sum as f64 / image.data().len() as f64
}

/// Variance of the 3x3 Laplacian response over interior pixels (valid
/// windows only, first channel). Flat or smoothly shaded frames score near
/// zero; saturated sensor noise scores in the tens of thousands.
pub fn laplacian_variance(image: &ImageU8) -> f64 {
    let (h, w) = (image.height(), image.width());
    if h < 3 || w < 3 {
        return 0.0;
    }
    let px = |r: usize, c: usize| f64::from(image.get(r, c, 0));
    let mut responses = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            responses
                .push(px(r - 1, c) + px(r + 1, c) + px(r, c - 1) + px(r, c + 1) - 4.0 * px(r, c));
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Splits samples into kept frames and rejected (sample, reason) pairs.
/// Blackout is checked first; both lists preserve input order.
pub fn sanity_filter(
    samples: Vec<Sample>,
    config: &PreprocessConfig,
) -> Result<(Vec<Sample>, Vec<(Sample, RejectReason)>), PreprocessError> {
    let verdicts: Vec<Option<RejectReason>> = samples
        .par_iter()
        .map(|s| {
            let image = require_u8(s)?;
            if image_mean(image) < config.blackout_mean_max {
                Ok(Some(RejectReason::Blackout))
            } else if laplacian_variance(image) > config.laplacian_var_max {
                Ok(Some(RejectReason::Noisy))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_, PreprocessError>>()?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (sample, verdict) in samples.into_iter().zip(verdicts) {
        match verdict {
            None => kept.push(sample),
            Some(reason) => rejected.push((sample, reason)),
        }
    }
    Ok((kept, rejected))
}

/// One line per rejected sample: `<id>\t<reason>`.
pub fn reject_report(rejected: &[(Sample, RejectReason)]) -> String {
    let mut out = String::new();
    for (sample, reason) in rejected {
        out.push_str(&sample.id);
        out.push('\t');
        out.push_str(reason.as_str());
        out.push('\n');
    }
    out
}

/// Inclusive pixel rectangle on the source canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl CropRect {
    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }
    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }
}

/// Tight bounding box of foreground classes {1,2,3} expanded by `pad` and
/// clamped to the canvas; grown to the minimum image edge if the box is
/// smaller than that.
pub fn foreground_bbox(mask: &MaskU8, pad: usize) -> Result<CropRect, PreprocessError> {
    let (h, w) = (mask.height(), mask.width());
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != 0 {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(PreprocessError::NoForegroundPixels);
    }
    let mut rect = CropRect {
        r0: r0.saturating_sub(pad),
        c0: c0.saturating_sub(pad),
        r1: (r1 + pad).min(h - 1),
        c1: (c1 + pad).min(w - 1),
    };
    grow_to_min_edge(&mut rect, h, w);
    Ok(rect)
}

fn grow_to_min_edge(rect: &mut CropRect, h: usize, w: usize) {
    while rect.height() < MIN_IMAGE_EDGE && (rect.r0 > 0 || rect.r1 < h - 1) {
        rect.r0 = rect.r0.saturating_sub(1);
        rect.r1 = (rect.r1 + 1).min(h - 1);
    }
    while rect.width() < MIN_IMAGE_EDGE && (rect.c0 > 0 || rect.c1 < w - 1) {
        rect.c0 = rect.c0.saturating_sub(1);
        rect.c1 = (rect.c1 + 1).min(w - 1);
    }
}

/// Crops image and mask to the same rectangle.
pub fn crop_to_rect(sample: &Sample, rect: CropRect) -> Result<Sample, PreprocessError> {
    let image = require_u8(sample)?;
    let (ch, height, width) = (image.channels(), rect.height(), rect.width());
    let mut data = Vec::with_capacity(height * width * ch);
    for r in rect.r0..=rect.r1 {
        for c in rect.c0..=rect.c1 {
            for k in 0..ch {
                data.push(image.get(r, c, k));
            }
        }
    }
    let image = ImageU8::new(height, width, ch, data)
        .map_err(|e| PreprocessError::InvalidConfig(e.to_string()))?;
    let mask = match &sample.mask {
        None => None,
        Some(m) => {
            let mut md = Vec::with_capacity(height * width);
            for r in rect.r0..=rect.r1 {
                for c in rect.c0..=rect.c1 {
                    md.push(m.get(r, c));
                }
            }
            Some(MaskU8::new(height, width, md).expect("cropped classes unchanged"))
        }
    };
    Ok(Sample {
        image: ImageData::U8(image),
        mask,
        ..sample.clone()
    })
}

/// Crops to the padded foreground bounding box of the sample's mask.
pub fn crop_to_bbox(sample: &Sample, pad: usize) -> Result<Sample, PreprocessError> {
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| PreprocessError::MissingMask(sample.id.clone()))?;
    let rect = foreground_bbox(mask, pad)?;
    crop_to_rect(sample, rect)
}

// Source coordinate of a destination pixel center under uniform scaling
// (align-corners-false convention).
fn src_center(dst: usize, scale: f64) -> f64 {
    (dst as f64 + 0.5) * scale - 0.5
}

pub fn resize_image_bilinear(image: &ImageU8, th: usize, tw: usize) -> ImageU8 {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let (sr, sc) = (h as f64 / th as f64, w as f64 / tw as f64);
    let mut data = Vec::with_capacity(th * tw * ch);
    for r in 0..th {
        let y = src_center(r, sr).clamp(0.0, h as f64 - 1.0);
        let (y0, fy) = (y.floor() as usize, y.fract());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..tw {
            let x = src_center(c, sc).clamp(0.0, w as f64 - 1.0);
            let (x0, fx) = (x.floor() as usize, x.fract());
            let x1 = (x0 + 1).min(w - 1);
            for k in 0..ch {
                let top = f64::from(image.get(y0, x0, k)) * (1.0 - fx)
                    + f64::from(image.get(y0, x1, k)) * fx;
                let bot = f64::from(image.get(y1, x0, k)) * (1.0 - fx)
                    + f64::from(image.get(y1, x1, k)) * fx;
                data.push(crate::imaging::round_clamp_u8(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    ImageU8::new(th, tw, ch, data).expect("target dims validated by caller")
}

pub fn resize_mask_nearest(mask: &MaskU8, th: usize, tw: usize) -> MaskU8 {
    let (h, w) = (mask.height(), mask.width());
    let (sr, sc) = (h as f64 / th as f64, w as f64 / tw as f64);
    let mut data = Vec::with_capacity(th * tw);
    for r in 0..th {
        let y = (((r as f64 + 0.5) * sr).floor() as usize).min(h - 1);
        for c in 0..tw {
            let x = (((c as f64 + 0.5) * sc).floor() as usize).min(w - 1);
            data.push(mask.get(y, x));
        }
    }
    MaskU8::new(th, tw, data).expect("labels unchanged")
}

/// Resizes to a square target: image bilinear, mask nearest-neighbor so
/// labels are never blended.
pub fn resize(sample: &Sample, target: usize) -> Result<Sample, PreprocessError> {
    if target < MIN_IMAGE_EDGE {
        return Err(PreprocessError::InvalidConfig(format!(
            "target resolution {target} below minimum {MIN_IMAGE_EDGE}"
        )));
    }
    let image = require_u8(sample)?;
    Ok(Sample {
        image: ImageData::U8(resize_image_bilinear(image, target, target)),
        mask: sample
            .mask
            .as_ref()
            .map(|m| resize_mask_nearest(m, target, target)),
        ..sample.clone()
    })
}

/// 3x3 median filter with replicated borders, applied per channel.
pub fn denoise(image: &ImageU8) -> ImageU8 {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut data = vec![0u8; h * w * ch];
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut window = [0u8; 9];
                let mut i = 0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        window[i] = image.get(clamp(r as i64 + dr, h), clamp(c as i64 + dc, w), k);
                        i += 1;
                    }
                }
                window.sort_unstable();
                data[(r * w + c) * ch + k] = window[4];
            }
        }
    }
    ImageU8::new(h, w, ch, data).expect("dims unchanged")
}

/// Maps 8-bit intensities to [-1, 1]: (p - 127.5) / 127.5.
pub fn normalize(image: &ImageU8) -> ImageF32 {
    let data = image
        .data()
        .iter()
        .map(|&p| (f32::from(p) - 127.5) / 127.5)
        .collect();
    ImageF32::new(image.height(), image.width(), image.channels(), data)
        .expect("dims unchanged")
}

/// Inverse of `normalize`, rounding back to 8 bits.
pub fn denormalize(image: &ImageF32) -> ImageU8 {
    let data = image
        .data()
        .iter()
        .map(|&f| crate::imaging::round_clamp_u8(f64::from(f) * 127.5 + 127.5))
        .collect();
    ImageU8::new(image.height(), image.width(), image.channels(), data)
        .expect("dims unchanged")
}

/// Seeded 90:10-style split. The test set takes round-half-up(fraction*N)
/// samples chosen by a seeded shuffle; both halves keep dataset order and
/// get their split tag written.
pub fn split(
    dataset: Vec<Sample>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), PreprocessError> {
    let n = dataset.len();
    if n < 10 {
        return Err(PreprocessError::DatasetTooSmall { n });
    }
    let test_count = (fraction * n as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut is_test = vec![false; n];
    for &i in order.iter().take(test_count) {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(n - test_count);
    let mut test = Vec::with_capacity(test_count);
    for (i, mut sample) in dataset.into_iter().enumerate() {
        if is_test[i] {
            sample.split = SplitTag::Test;
            test.push(sample);
        } else {
            sample.split = SplitTag::Train;
            train.push(sample);
        }
    }
    Ok((train, test))
}

/// Full per-run chain at one target resolution: resample, sanity-filter,
/// crop to the foreground box, resize, denoise. Returns conditioned samples
/// and the rejected frames with reasons.
pub fn preprocess_run(
    run: &[Sample],
    config: &PreprocessConfig,
    target: usize,
) -> Result<(Vec<Sample>, Vec<(Sample, RejectReason)>), PreprocessError> {
    config.validate()?;
    let sampled = resample(run, config.window_min)?;
    let (kept, rejected) = sanity_filter(sampled, config)?;
    let processed: Result<Vec<Sample>, PreprocessError> = kept
        .par_iter()
        .map(|s| {
            let cropped = crop_to_bbox(s, config.crop_pad)?;
            let resized = resize(&cropped, target)?;
            let image = require_u8(&resized)?;
            Ok(Sample {
                image: ImageData::U8(denoise(image)),
                ..resized.clone()
            })
        })
        .collect();
    Ok((processed?, rejected))
}
