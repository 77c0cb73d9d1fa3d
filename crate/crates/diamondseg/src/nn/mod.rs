//! Minimal tensor and gradient kernel: convolutions (strided, dilated,
//! depthwise), batch normalization, activations, bilinear upsampling,
//! pooling, the two segmentation losses, Adam, weight serialization, and a
//! finite-difference verification harness.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checking in `f64`. Ops are single-threaded on purpose; identical inputs
//! give bitwise-identical outputs.

mod gradcheck;
mod loss;
mod ops;
mod optim;
mod weights;

pub use gradcheck::{check_gradients, project, projection, GradCheckEntry, GradCheckReport};
pub use loss::{cross_entropy_loss, focal_loss, prediction_entropy, FocalLossParams};
pub use ops::{
    batchnorm_backward, batchnorm_forward, bilinear_upsample, bilinear_upsample_backward,
    conv2d_backward, conv2d_forward, depthwise_backward, depthwise_forward,
    depthwise_separable_forward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    same_padding, softmax_backward, softmax_per_pixel, BatchNorm, BnCache, BnGrads, BnMode,
    Conv2d, ConvGrads,
};
pub use optim::{AdamState, LR_MAX, LR_MIN};
pub use weights::{find_config, load_weights, save_weights, WeightRecord, CONFIG_TENSOR_NAME};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {0} values per channel is too small to normalize")]
    DegenerateBatch(usize),
    #[error("upsample factor {0} not one of 2, 4, 8, 16")]
    InvalidFactor(usize),
    #[error("class {class} out of range for {num_classes} channels")]
    ClassOutOfRange { class: u8, num_classes: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("weight file error: {0}")]
    WeightFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating element type for tensors. `f32` trains, `f64` verifies.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// General matrix multiply with explicit strides, row-major friendly.
    ///
    /// # Safety
    /// Pointers must cover m*k, k*n, m*n elements under the given strides.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S: Scalar> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Result<Self, NnError> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "dims ({n},{c},{h},{w}) must be positive"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for dims ({n},{c},{h},{w})",
                data.len()
            )));
        }
        let t = Tensor4 { n, c, h, w, data };
        t.debug_check_finite("new");
        Ok(t)
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![S::zero(); n * c * h * w],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: S) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> S,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ni, ci, hi, wi));
                    }
                }
            }
        }
        Tensor4 { n, c, h, w, data }
    }

    /// He-style fan-in initialization: N(0, 2/fan_in), seeded.
    pub fn he_normal(n: usize, c: usize, h: usize, w: usize, fan_in: usize, seed: u64) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w)
            .map(|_| S::from_f64(normal.sample(&mut rng)))
            .collect();
        Tensor4 { n, c, h, w, data }
    }

    /// Seeded uniform fill, mostly for tests and gradient checks.
    pub fn random_uniform(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        lo: f64,
        hi: f64,
        seed: u64,
    ) -> Self {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w)
            .map(|_| S::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor4 { n, c, h, w, data }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut S {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Converts element type, e.g. an `f32` model to `f64` for checking.
    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// NaN/Inf guard; active only in debug builds.
    pub fn debug_check_finite(&self, context: &str) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor at {context}"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor4::<f32>::from_fn(2, 3, 4, 5, |n, c, h, w| {
            (((n * 3 + c) * 4 + h) * 5 + w) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.data()[119], 119.0);
        assert_eq!(t.numel(), 120);
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor4::<f32>::new(1, 2, 3, 4, vec![0.0; 23]).is_err());
        assert!(Tensor4::<f32>::new(0, 2, 3, 4, vec![]).is_err());
        assert!(Tensor4::<f32>::new(1, 2, 3, 4, vec![0.0; 24]).is_ok());
    }

    #[test]
    fn he_init_is_seeded_and_scaled() {
        let a = Tensor4::<f32>::he_normal(8, 8, 3, 3, 72, 5);
        let b = Tensor4::<f32>::he_normal(8, 8, 3, 3, 72, 5);
        let c = Tensor4::<f32>::he_normal(8, 8, 3, 3, 72, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let var: f64 = a.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()
            / a.numel() as f64;
        let expect = 2.0 / 72.0;
        assert!(
            (var - expect).abs() < expect * 0.3,
            "sample variance {var} vs expected {expect}"
        );
    }

    #[test]
    fn cast_roundtrips_values() {
        let t = Tensor4::<f32>::random_uniform(1, 2, 3, 3, -1.0, 1.0, 9);
        let back: Tensor4<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
