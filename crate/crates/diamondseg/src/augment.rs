//! Dataset expansion: affine warps with correct mask semantics, photometric
//! distortions, blockwise compression simulation, and rate-N dataset growth
//! with per-copy seeded draws.

use crate::imaging::{round_clamp_u8, ImageData, ImageU8, Sample, SplitTag};
use crate::seed::{derive_seed, hash_str};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid transform parameter: {0}")]
    InvalidParameter(String),
    #[error("sample {0} does not carry an 8-bit image")]
    NotEightBit(String),
}

/// One drawn transform. Geometric kinds (rotate/shear/scale) compose into a
/// single affine map; the rest act on pixel intensities only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSpec {
    /// Degrees in [-180, 180]; multiples of 90 map the pixel lattice exactly.
    Rotate(f64),
    /// Horizontal shear factor: col' = col + factor * (row - center).
    Shear(f64),
    /// Uniform scale about the image center, in [0.5, 2.0].
    Scale(f64),
    /// Additive zero-mean gaussian noise with the given sigma.
    GaussianNoise(f64),
    /// Gaussian blur truncated at 3 sigma.
    Blur(f64),
    /// Unsharp mask: out = in + amount * (in - blur_1(in)).
    Sharpen(f64),
    /// Fixed directional 3x3 kernel plus a 128 offset.
    Emboss,
    /// Blockwise DCT quantization at the given quality in [1, 100].
    Jpeg(u8),
}

impl TransformSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let err = |m: String| Err(AugmentError::InvalidParameter(m));
        match *self {
            TransformSpec::Rotate(d) if !(-180.0..=180.0).contains(&d) => {
                err(format!("rotate({d}) outside [-180, 180]"))
            }
            TransformSpec::Shear(s) if !(-1.0..=1.0).contains(&s) => {
                err(format!("shear({s}) outside [-1, 1]"))
            }
            TransformSpec::Scale(f) if !(0.5..=2.0).contains(&f) => {
                err(format!("scale({f}) outside [0.5, 2.0]"))
            }
            TransformSpec::GaussianNoise(s) | TransformSpec::Blur(s) if !(s >= 0.0) => {
                err(format!("sigma {s} must be >= 0"))
            }
            TransformSpec::Sharpen(a) if !(a >= 0.0) => {
                err(format!("sharpen({a}) must be >= 0"))
            }
            TransformSpec::Jpeg(q) if !(1..=100).contains(&q) => {
                err(format!("jpeg({q}) outside [1, 100]"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            TransformSpec::Rotate(_) | TransformSpec::Shear(_) | TransformSpec::Scale(_)
        )
    }

    /// Short textual form used in provenance metadata.
    pub fn describe(&self) -> String {
        match *self {
            TransformSpec::Rotate(d) => format!("rotate({d:.2})"),
            TransformSpec::Shear(s) => format!("shear({s:.3})"),
            TransformSpec::Scale(f) => format!("scale({f:.3})"),
            TransformSpec::GaussianNoise(s) => format!("gaussian_noise({s:.2})"),
            TransformSpec::Blur(s) => format!("blur({s:.2})"),
            TransformSpec::Sharpen(a) => format!("sharpen({a:.2})"),
            TransformSpec::Emboss => "emboss".to_string(),
            TransformSpec::Jpeg(q) => format!("jpeg({q})"),
        }
    }
}

/// Dataset expansion plan: total output is rate x |input| (test-split
/// samples are carried through but never multiplied).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPlan {
    pub rate: usize,
    pub transforms_per_copy_min: usize,
    pub transforms_per_copy_max: usize,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            rate: 2,
            transforms_per_copy_min: 1,
            transforms_per_copy_max: 2,
            seed: 0,
        }
    }
}

/// Default draw ranges for random transforms: strong enough to vary the
/// data, mild enough to keep the foreground recognizable.
pub const ROTATE_MAX_DEG: f64 = 15.0;
pub const SHEAR_MAX: f64 = 0.2;
pub const SCALE_MIN: f64 = 0.8;
pub const SCALE_MAX: f64 = 1.2;
pub const NOISE_SIGMA_MAX: f64 = 12.0;
pub const BLUR_SIGMA_MAX: f64 = 1.5;
pub const SHARPEN_AMOUNT_MAX: f64 = 1.5;
pub const JPEG_QUALITY_MIN: u8 = 30;

// Row-major 2x2 matrix acting on (row, col) offsets from the image center.
type Mat2 = [[f64; 2]; 2];

const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

fn mat_mul(a: Mat2, b: Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mat_inv(m: Mat2) -> Mat2 {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

fn rotation_matrix(deg: f64) -> Mat2 {
    // Exact entries at quadrant angles so those warps permute the lattice.
    let quarter = (deg / 90.0).round();
    if (deg - quarter * 90.0).abs() < 1e-9 {
        let (s, c) = match quarter.rem_euclid(4.0) as u8 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
        return [[c, s], [-s, c]];
    }
    let (s, c) = deg.to_radians().sin_cos();
    [[c, s], [-s, c]]
}

fn transform_matrix(spec: &TransformSpec) -> Mat2 {
    match *spec {
        TransformSpec::Rotate(deg) => rotation_matrix(deg),
        TransformSpec::Shear(f) => [[1.0, 0.0], [f, 1.0]],
        TransformSpec::Scale(f) => [[f, 0.0], [0.0, f]],
        _ => IDENTITY,
    }
}

/// Composes the geometric members of `specs` (in order) into one matrix.
pub fn compose_geometric(specs: &[TransformSpec]) -> Result<Mat2, AugmentError> {
    let mut m = IDENTITY;
    for spec in specs {
        spec.validate()?;
        if spec.is_geometric() {
            m = mat_mul(transform_matrix(spec), m);
        }
    }
    Ok(m)
}

fn bilinear_at(image: &ImageU8, y: f64, x: f64, k: usize) -> u8 {
    let (h, w) = (image.height(), image.width());
    if y < 0.0 || x < 0.0 || y > h as f64 - 1.0 || x > w as f64 - 1.0 {
        return 0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = f64::from(image.get(y0, x0, k)) * (1.0 - fx) + f64::from(image.get(y0, x1, k)) * fx;
    let bot = f64::from(image.get(y1, x0, k)) * (1.0 - fx) + f64::from(image.get(y1, x1, k)) * fx;
    round_clamp_u8(top * (1.0 - fy) + bot * fy)
}

/// Applies one forward affine map about the image center to image and mask:
/// image bilinear, mask nearest-neighbor, exposed canvas filled with
/// background (class 0, intensity 0).
pub fn warp_affine(sample: &Sample, m: Mat2) -> Result<Sample, AugmentError> {
    let image = sample
        .image
        .as_u8()
        .ok_or_else(|| AugmentError::NotEightBit(sample.id.clone()))?;
    let inv = mat_inv(m);
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src_of = |r: usize, c: usize| {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        (
            inv[0][0] * dr + inv[0][1] * dc + cr,
            inv[1][0] * dr + inv[1][1] * dc + cc,
        )
    };

    let mut data = Vec::with_capacity(h * w * ch);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = src_of(r, c);
            for k in 0..ch {
                data.push(bilinear_at(image, y, x, k));
            }
        }
    }
    let image = ImageU8::new(h, w, ch, data).expect("dims unchanged");

    let mask = sample.mask.as_ref().map(|mask| {
        let mut md = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (y, x) = src_of(r, c);
                let (yi, xi) = (y.round(), x.round());
                let inside =
                    yi >= 0.0 && xi >= 0.0 && yi <= h as f64 - 1.0 && xi <= w as f64 - 1.0;
                md.push(if inside {
                    mask.get(yi as usize, xi as usize)
                } else {
                    0
                });
            }
        }
        crate::imaging::MaskU8::new(h, w, md).expect("labels unchanged")
    });

    Ok(Sample {
        image: ImageData::U8(image),
        mask,
        ..sample.clone()
    })
}

/// Applies a single geometric transform (as its own affine map).
pub fn apply_geometric(sample: &Sample, spec: &TransformSpec) -> Result<Sample, AugmentError> {
    spec.validate()?;
    if !spec.is_geometric() {
        return Err(AugmentError::InvalidParameter(format!(
            "{} is not a geometric transform",
            spec.describe()
        )));
    }
    warp_affine(sample, transform_matrix(spec))
}

fn blur_f64(image: &ImageU8, sigma: f64) -> Vec<f64> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let src: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();
    if sigma <= 0.0 {
        return src;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-((k * k) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut horizontal = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let cc = clamp(c as i64 + ki as i64 - radius, w);
                    acc += kv * src[(r * w + cc) * ch + k];
                }
                horizontal[(r * w + c) * ch + k] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let rr = clamp(r as i64 + ki as i64 - radius, h);
                    acc += kv * horizontal[(rr * w + c) * ch + k];
                }
                out[(r * w + c) * ch + k] = acc;
            }
        }
    }
    out
}

fn from_f64(image: &ImageU8, data: Vec<f64>) -> ImageU8 {
    let bytes: Vec<u8> = data.into_iter().map(round_clamp_u8).collect();
    ImageU8::new(image.height(), image.width(), image.channels(), bytes)
        .expect("dims unchanged")
}

// Directional NW-to-SE relief kernel; zero-sum, so flat areas settle at the
// 128 offset.
const EMBOSS_KERNEL: [[f64; 3]; 3] = [[-1.0, -1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];

/// Applies one photometric transform; the mask is untouched by contract.
/// `seed` drives the noise draw and is ignored by deterministic kinds.
pub fn apply_photometric(
    image: &ImageU8,
    spec: &TransformSpec,
    seed: u64,
) -> Result<ImageU8, AugmentError> {
    spec.validate()?;
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    match *spec {
        TransformSpec::GaussianNoise(sigma) => {
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| AugmentError::InvalidParameter(e.to_string()))?;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let data = image
                .data()
                .iter()
                .map(|&p| round_clamp_u8(f64::from(p) + normal.sample(&mut rng)))
                .collect();
            Ok(ImageU8::new(h, w, ch, data).expect("dims unchanged"))
        }
        TransformSpec::Blur(sigma) => Ok(from_f64(image, blur_f64(image, sigma))),
        TransformSpec::Sharpen(amount) => {
            let blurred = blur_f64(image, 1.0);
            let data = image
                .data()
                .iter()
                .zip(&blurred)
                .map(|(&p, &b)| f64::from(p) + amount * (f64::from(p) - b))
                .collect();
            Ok(from_f64(image, data))
        }
        TransformSpec::Emboss => {
            let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
            let mut data = Vec::with_capacity(h * w * ch);
            for r in 0..h {
                for c in 0..w {
                    for k in 0..ch {
                        let mut acc = 128.0;
                        for (dr, row) in EMBOSS_KERNEL.iter().enumerate() {
                            for (dc, &kv) in row.iter().enumerate() {
                                let rr = clamp(r as i64 + dr as i64 - 1, h);
                                let cc = clamp(c as i64 + dc as i64 - 1, w);
                                acc += kv * f64::from(image.get(rr, cc, k));
                            }
                        }
                        data.push(round_clamp_u8(acc));
                    }
                }
            }
            Ok(ImageU8::new(h, w, ch, data).expect("dims unchanged"))
        }
        TransformSpec::Jpeg(quality) => jpeg_simulate(image, quality),
        ref geometric => Err(AugmentError::InvalidParameter(format!(
            "{} is not a photometric transform",
            geometric.describe()
        ))),
    }
}

// Standard luminance quantization table (quality 50 baseline).
const LUMA_QUANT: [[i64; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

fn quant_steps(quality: u8) -> [[f64; 8]; 8] {
    let q = i64::from(quality);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut steps = [[1.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            steps[u][v] = ((LUMA_QUANT[u][v] * scale + 50) / 100).clamp(1, 255) as f64;
        }
    }
    steps
}

// Orthonormal 1-D DCT-II basis, row u = frequency, column x = position.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut t = [[0.0; 8]; 8];
    for (u, row) in t.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    t
}

/// Compression artifact simulation: per 8x8 block, level shift, 2-D DCT,
/// quantize with the standard luminance table at `quality`, reconstruct.
/// Edge blocks sample replicated borders.
pub fn jpeg_simulate(image: &ImageU8, quality: u8) -> Result<ImageU8, AugmentError> {
    TransformSpec::Jpeg(quality).validate()?;
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let steps = quant_steps(quality);
    let t = dct_basis();
    let mut data = vec![0u8; h * w * ch];
    for k in 0..ch {
        for br in (0..h).step_by(8) {
            for bc in (0..w).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let r = (br + i).min(h - 1);
                        let c = (bc + j).min(w - 1);
                        *v = f64::from(image.get(r, c, k)) - 128.0;
                    }
                }
                // F = T B T'; quantize; B = T' F T.
                let mut tb = [[0.0f64; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        tb[i][j] = (0..8).map(|m| t[i][m] * block[m][j]).sum();
                    }
                }
                let mut coeffs = [[0.0f64; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        let f: f64 = (0..8).map(|m| tb[i][m] * t[j][m]).sum();
                        coeffs[i][j] = (f / steps[i][j]).round() * steps[i][j];
                    }
                }
                let mut tc = [[0.0f64; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        tc[i][j] = (0..8).map(|m| t[m][i] * coeffs[m][j]).sum();
                    }
                }
                for i in 0..8 {
                    let r = br + i;
                    if r >= h {
                        break;
                    }
                    for j in 0..8 {
                        let c = bc + j;
                        if c >= w {
                            break;
                        }
                        let v: f64 = (0..8).map(|m| tc[i][m] * t[m][j]).sum();
                        data[(r * w + c) * ch + k] = round_clamp_u8(v + 128.0);
                    }
                }
            }
        }
    }
    Ok(ImageU8::new(h, w, ch, data).expect("dims unchanged"))
}

/// Applies a drawn transform list to one sample: the geometric members
/// compose into a single affine warp (no double interpolation), then the
/// photometric members run in their drawn order.
pub fn augment_sample(
    sample: &Sample,
    specs: &[TransformSpec],
    seed: u64,
) -> Result<Sample, AugmentError> {
    let matrix = compose_geometric(specs)?;
    let mut out = if specs.iter().any(TransformSpec::is_geometric) {
        warp_affine(sample, matrix)?
    } else {
        sample.clone()
    };
    for (idx, spec) in specs.iter().enumerate() {
        if spec.is_geometric() {
            continue;
        }
        let image = out
            .image
            .as_u8()
            .ok_or_else(|| AugmentError::NotEightBit(out.id.clone()))?;
        let transformed = apply_photometric(image, spec, derive_seed(seed, &[idx as u64]))?;
        out.image = ImageData::U8(transformed);
    }
    Ok(out)
}

fn draw_transform(rng: &mut ChaCha12Rng) -> TransformSpec {
    match rng.random_range(0..8u8) {
        0 => TransformSpec::Rotate(rng.random_range(-ROTATE_MAX_DEG..=ROTATE_MAX_DEG)),
        1 => TransformSpec::Shear(rng.random_range(-SHEAR_MAX..=SHEAR_MAX)),
        2 => TransformSpec::Scale(rng.random_range(SCALE_MIN..=SCALE_MAX)),
        3 => TransformSpec::GaussianNoise(rng.random_range(0.0..=NOISE_SIGMA_MAX)),
        4 => TransformSpec::Blur(rng.random_range(0.0..=BLUR_SIGMA_MAX)),
        5 => TransformSpec::Sharpen(rng.random_range(0.0..=SHARPEN_AMOUNT_MAX)),
        6 => TransformSpec::Emboss,
        _ => TransformSpec::Jpeg(rng.random_range(JPEG_QUALITY_MIN..=100)),
    }
}

/// Expands a dataset to rate x |input|: every original is kept, and each
/// non-test sample contributes rate-1 augmented copies with ids
/// `<id>_aug<k>` and provenance recording the drawn transform order.
/// Deterministic in the plan seed, independent of thread schedule.
pub fn augment_dataset(dataset: &[Sample], plan: &AugmentPlan) -> Result<Vec<Sample>, AugmentError> {
    if plan.rate < 1 {
        return Err(AugmentError::InvalidParameter("rate must be >= 1".into()));
    }
    if plan.transforms_per_copy_min > plan.transforms_per_copy_max
        || plan.transforms_per_copy_min == 0
    {
        return Err(AugmentError::InvalidParameter(format!(
            "transforms_per_copy range {}..={} invalid",
            plan.transforms_per_copy_min, plan.transforms_per_copy_max
        )));
    }
    let groups: Result<Vec<Vec<Sample>>, AugmentError> = dataset
        .par_iter()
        .map(|sample| {
            let mut group = vec![sample.clone()];
            if sample.split == SplitTag::Test {
                return Ok(group);
            }
            for k in 1..plan.rate {
                let copy_seed = derive_seed(plan.seed, &[hash_str(&sample.id), k as u64]);
                let mut rng = ChaCha12Rng::seed_from_u64(copy_seed);
                let count =
                    rng.random_range(plan.transforms_per_copy_min..=plan.transforms_per_copy_max);
                let specs: Vec<TransformSpec> =
                    (0..count).map(|_| draw_transform(&mut rng)).collect();
                let mut copy = augment_sample(sample, &specs, copy_seed)?;
                copy.id = format!("{}_aug{k}", sample.id);
                copy.provenance = Some(
                    specs
                        .iter()
                        .map(TransformSpec::describe)
                        .collect::<Vec<_>>()
                        .join(";"),
                );
                group.push(copy);
            }
            Ok(group)
        })
        .collect();
    Ok(groups?.into_iter().flatten().collect())
}
