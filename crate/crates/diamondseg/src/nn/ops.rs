//! Layer operations with exact adjoint backward passes.

use super::{NnError, Scalar, Tensor4};

/// Convolution parameters: dense weights (C_out, C_in, k, k) or depthwise
/// weights (C, 1, k, k), with bias, stride, dilation, zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S: Scalar> {
    pub weight: Tensor4<S>,
    pub bias: Vec<S>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

/// Padding that preserves spatial dims at stride 1: d*(k-1)/2.
pub fn same_padding(k: usize, dilation: usize) -> usize {
    dilation * (k - 1) / 2
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(weight: Tensor4<S>, bias: Vec<S>, stride: usize, dilation: usize, padding: usize) -> Result<Self, NnError> {
        let (co, _, kh, kw) = weight.dims();
        if kh != kw || kh % 2 == 0 {
            return Err(NnError::InvalidParameter(format!(
                "kernel {kh}x{kw} must be square with odd size"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(NnError::InvalidParameter("stride and dilation must be >= 1".into()));
        }
        if bias.len() != co {
            return Err(NnError::ShapeMismatch(format!(
                "{} bias values for {co} output channels",
                bias.len()
            )));
        }
        Ok(Conv2d { weight, bias, stride, dilation, padding })
    }

    /// He-initialized dense conv with same padding.
    pub fn he(c_out: usize, c_in: usize, k: usize, stride: usize, dilation: usize, seed: u64) -> Self {
        let weight = Tensor4::he_normal(c_out, c_in, k, k, c_in * k * k, seed);
        Conv2d {
            weight,
            bias: vec![S::zero(); c_out],
            stride,
            dilation,
            padding: same_padding(k, dilation),
        }
    }

    /// He-initialized depthwise conv (one filter per channel).
    pub fn he_depthwise(channels: usize, k: usize, stride: usize, dilation: usize, seed: u64) -> Self {
        let weight = Tensor4::he_normal(channels, 1, k, k, k * k, seed);
        Conv2d {
            weight,
            bias: vec![S::zero(); channels],
            stride,
            dilation,
            padding: same_padding(k, dilation),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims().2
    }

    pub fn kernel_effective(&self) -> usize {
        let k = self.kernel();
        k + (k - 1) * (self.dilation - 1)
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let k_eff = self.kernel_effective();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k_eff || wp < k_eff {
            return Err(NnError::ShapeMismatch(format!(
                "effective kernel {k_eff} exceeds padded input {hp}x{wp}"
            )));
        }
        Ok(((hp - k_eff) / self.stride + 1, (wp - k_eff) / self.stride + 1))
    }
}

pub struct ConvGrads<S: Scalar> {
    pub dx: Tensor4<S>,
    pub dweight: Tensor4<S>,
    pub dbias: Vec<S>,
}

// Lowers one sample's receptive fields into a (C_in*k*k) x (oh*ow) matrix.
fn im2col<S: Scalar>(
    x: &Tensor4<S>,
    n: usize,
    p: &Conv2d<S>,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    let (_, c_in, h, w) = x.dims();
    let k = p.kernel();
    let l = oh * ow;
    for c in 0..c_in {
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                for oy in 0..oh {
                    let iy = (oy * p.stride + u * p.dilation) as i64 - p.padding as i64;
                    for ox in 0..ow {
                        let ix = (ox * p.stride + v * p.dilation) as i64 - p.padding as i64;
                        cols[row * l + oy * ow + ox] =
                            if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                x.at(n, c, iy as usize, ix as usize)
                            } else {
                                S::zero()
                            };
                    }
                }
            }
        }
    }
}

/// y[n,o,i,j] = bias[o] + sum over c,u,v of
/// x[n, c, i*s + u*d - p, j*s + v*d - p] * w[o,c,u,v], zero outside.
pub fn conv2d_forward<S: Scalar>(x: &Tensor4<S>, p: &Conv2d<S>) -> Result<Tensor4<S>, NnError> {
    let (n, c_in, h, w) = x.dims();
    let (c_out, wc_in, k, _) = p.weight.dims();
    if wc_in != c_in {
        return Err(NnError::ShapeMismatch(format!(
            "input has {c_in} channels, weights expect {wc_in}"
        )));
    }
    let (oh, ow) = p.out_hw(h, w)?;
    let l = oh * ow;
    let rows = c_in * k * k;
    let mut cols = vec![S::zero(); rows * l];
    let mut y = Tensor4::zeros(n, c_out, oh, ow);
    for ni in 0..n {
        im2col(x, ni, p, oh, ow, &mut cols);
        let out = &mut y.data_mut()[ni * c_out * l..(ni + 1) * c_out * l];
        // out (c_out x l) = W (c_out x rows) * cols (rows x l)
        unsafe {
            S::gemm(
                c_out,
                rows,
                l,
                S::one(),
                p.weight.data().as_ptr(),
                rows as isize,
                1,
                cols.as_ptr(),
                l as isize,
                1,
                S::zero(),
                out.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        for o in 0..c_out {
            let b = p.bias[o];
            for v in &mut out[o * l..(o + 1) * l] {
                *v += b;
            }
        }
    }
    y.debug_check_finite("conv2d_forward");
    Ok(y)
}

/// Exact adjoint of [`conv2d_forward`]; receptive-field columns are
/// recomputed rather than cached.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor4<S>,
    p: &Conv2d<S>,
    dy: &Tensor4<S>,
) -> Result<ConvGrads<S>, NnError> {
    let (n, c_in, h, w) = x.dims();
    let (c_out, _, k, _) = p.weight.dims();
    let (oh, ow) = p.out_hw(h, w)?;
    if dy.dims() != (n, c_out, oh, ow) {
        return Err(NnError::ShapeMismatch(format!(
            "dy dims {:?} do not match output ({n},{c_out},{oh},{ow})",
            dy.dims()
        )));
    }
    let l = oh * ow;
    let rows = c_in * k * k;
    let mut cols = vec![S::zero(); rows * l];
    let mut dcols = vec![S::zero(); rows * l];
    let mut dx = Tensor4::zeros(n, c_in, h, w);
    let mut dweight = Tensor4::zeros(c_out, c_in, k, k);
    let mut dbias = vec![S::zero(); c_out];

    for ni in 0..n {
        im2col(x, ni, p, oh, ow, &mut cols);
        let dy_n = &dy.data()[ni * c_out * l..(ni + 1) * c_out * l];
        // dW += dy_n (c_out x l) * cols^T (l x rows)
        unsafe {
            S::gemm(
                c_out,
                l,
                rows,
                S::one(),
                dy_n.as_ptr(),
                l as isize,
                1,
                cols.as_ptr(),
                1,
                l as isize,
                S::one(),
                dweight.data_mut().as_mut_ptr(),
                rows as isize,
                1,
            );
            // dcols (rows x l) = W^T (rows x c_out) * dy_n (c_out x l)
            S::gemm(
                rows,
                c_out,
                l,
                S::one(),
                p.weight.data().as_ptr(),
                1,
                rows as isize,
                dy_n.as_ptr(),
                l as isize,
                1,
                S::zero(),
                dcols.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        for o in 0..c_out {
            for v in &dy_n[o * l..(o + 1) * l] {
                dbias[o] += *v;
            }
        }
        // col2im: scatter-add the column gradients back to input pixels.
        for c in 0..c_in {
            for u in 0..k {
                for v in 0..k {
                    let row = (c * k + u) * k + v;
                    for oy in 0..oh {
                        let iy = (oy * p.stride + u * p.dilation) as i64 - p.padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * p.stride + v * p.dilation) as i64 - p.padding as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            *dx.at_mut(ni, c, iy as usize, ix as usize) +=
                                dcols[row * l + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

/// Channelwise spatial convolution: weights (C, 1, k, k), one filter per
/// input channel, same stride/dilation/padding semantics as `conv2d`.
pub fn depthwise_forward<S: Scalar>(x: &Tensor4<S>, p: &Conv2d<S>) -> Result<Tensor4<S>, NnError> {
    let (n, c, h, w) = x.dims();
    let (wc, w1, k, _) = p.weight.dims();
    if wc != c || w1 != 1 {
        return Err(NnError::ShapeMismatch(format!(
            "depthwise weights ({wc},{w1},k,k) need one filter per input channel ({c})"
        )));
    }
    let (oh, ow) = p.out_hw(h, w)?;
    let mut y = Tensor4::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias[ci];
                    for u in 0..k {
                        let iy = (oy * p.stride + u * p.dilation) as i64 - p.padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for v in 0..k {
                            let ix = (ox * p.stride + v * p.dilation) as i64 - p.padding as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += x.at(ni, ci, iy as usize, ix as usize) * p.weight.at(ci, 0, u, v);
                        }
                    }
                    *y.at_mut(ni, ci, oy, ox) = acc;
                }
            }
        }
    }
    y.debug_check_finite("depthwise_forward");
    Ok(y)
}

pub fn depthwise_backward<S: Scalar>(
    x: &Tensor4<S>,
    p: &Conv2d<S>,
    dy: &Tensor4<S>,
) -> Result<ConvGrads<S>, NnError> {
    let (n, c, h, w) = x.dims();
    let k = p.kernel();
    let (oh, ow) = p.out_hw(h, w)?;
    if dy.dims() != (n, c, oh, ow) {
        return Err(NnError::ShapeMismatch(format!(
            "dy dims {:?} do not match output ({n},{c},{oh},{ow})",
            dy.dims()
        )));
    }
    let mut dx = Tensor4::zeros(n, c, h, w);
    let mut dweight = Tensor4::zeros(c, 1, k, k);
    let mut dbias = vec![S::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy.at(ni, ci, oy, ox);
                    dbias[ci] += g;
                    for u in 0..k {
                        let iy = (oy * p.stride + u * p.dilation) as i64 - p.padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for v in 0..k {
                            let ix = (ox * p.stride + v * p.dilation) as i64 - p.padding as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            *dweight.at_mut(ci, 0, u, v) +=
                                g * x.at(ni, ci, iy as usize, ix as usize);
                            *dx.at_mut(ni, ci, iy as usize, ix as usize) +=
                                g * p.weight.at(ci, 0, u, v);
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

/// Depthwise spatial filtering followed by a 1x1 channel mix.
pub fn depthwise_separable_forward<S: Scalar>(
    x: &Tensor4<S>,
    depthwise: &Conv2d<S>,
    pointwise: &Conv2d<S>,
) -> Result<Tensor4<S>, NnError> {
    if pointwise.kernel() != 1 {
        return Err(NnError::InvalidParameter(format!(
            "pointwise stage must use a 1x1 kernel, got {}",
            pointwise.kernel()
        )));
    }
    conv2d_forward(&depthwise_forward(x, depthwise)?, pointwise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel affine normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<S: Scalar> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub epsilon: S,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: S::from_f64(0.9),
            epsilon: S::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values cached by the train-mode forward pass for the exact backward.
pub struct BnCache<S: Scalar> {
    pub xhat: Tensor4<S>,
    pub inv_std: Vec<S>,
}

/// Train mode normalizes by batch statistics (and updates running stats by
/// `running = momentum*running + (1-momentum)*batch`); eval mode is a fixed
/// per-channel affine map using the running stats.
pub fn batchnorm_forward<S: Scalar>(
    x: &Tensor4<S>,
    state: &mut BatchNorm<S>,
    mode: BnMode,
) -> Result<(Tensor4<S>, Option<BnCache<S>>), NnError> {
    let (n, c, h, w) = x.dims();
    if c != state.channels() {
        return Err(NnError::ShapeMismatch(format!(
            "{c} input channels vs {} normalized channels",
            state.channels()
        )));
    }
    let m = n * h * w;
    match mode {
        BnMode::Eval => {
            let mut y = Tensor4::zeros(n, c, h, w);
            for ci in 0..c {
                let inv = (state.running_var[ci] + state.epsilon).sqrt().recip();
                let (g, b, mu) = (state.gamma[ci], state.beta[ci], state.running_mean[ci]);
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            *y.at_mut(ni, ci, hi, wi) = g * (x.at(ni, ci, hi, wi) - mu) * inv + b;
                        }
                    }
                }
            }
            Ok((y, None))
        }
        BnMode::Train => {
            if m < 2 {
                return Err(NnError::DegenerateBatch(m));
            }
            let mf = S::from_f64(m as f64);
            let mut xhat = Tensor4::zeros(n, c, h, w);
            let mut y = Tensor4::zeros(n, c, h, w);
            let mut inv_std = vec![S::zero(); c];
            for ci in 0..c {
                let mut mean = S::zero();
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            mean += x.at(ni, ci, hi, wi);
                        }
                    }
                }
                mean /= mf;
                let mut var = S::zero();
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let d = x.at(ni, ci, hi, wi) - mean;
                            var += d * d;
                        }
                    }
                }
                var /= mf;
                let inv = (var + state.epsilon).sqrt().recip();
                inv_std[ci] = inv;
                let (g, b) = (state.gamma[ci], state.beta[ci]);
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let xh = (x.at(ni, ci, hi, wi) - mean) * inv;
                            *xhat.at_mut(ni, ci, hi, wi) = xh;
                            *y.at_mut(ni, ci, hi, wi) = g * xh + b;
                        }
                    }
                }
                let keep = state.momentum;
                let take = S::one() - keep;
                state.running_mean[ci] = keep * state.running_mean[ci] + take * mean;
                state.running_var[ci] = keep * state.running_var[ci] + take * var;
            }
            Ok((y, Some(BnCache { xhat, inv_std })))
        }
    }
}

pub struct BnGrads<S: Scalar> {
    pub dx: Tensor4<S>,
    pub dgamma: Vec<S>,
    pub dbeta: Vec<S>,
}

/// Full train-mode backward through the batch statistics:
/// dx = gamma * inv_std / M * (M*dy - sum(dy) - xhat * sum(dy*xhat)).
pub fn batchnorm_backward<S: Scalar>(
    state: &BatchNorm<S>,
    cache: &BnCache<S>,
    dy: &Tensor4<S>,
) -> Result<BnGrads<S>, NnError> {
    let (n, c, h, w) = dy.dims();
    if cache.xhat.dims() != dy.dims() {
        return Err(NnError::ShapeMismatch(format!(
            "cache dims {:?} vs dy dims {:?}",
            cache.xhat.dims(),
            dy.dims()
        )));
    }
    let m = S::from_f64((n * h * w) as f64);
    let mut dx = Tensor4::zeros(n, c, h, w);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ci in 0..c {
        let mut sum_dy = S::zero();
        let mut sum_dy_xhat = S::zero();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let g = dy.at(ni, ci, hi, wi);
                    sum_dy += g;
                    sum_dy_xhat += g * cache.xhat.at(ni, ci, hi, wi);
                }
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let scale = state.gamma[ci] * cache.inv_std[ci] / m;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let g = dy.at(ni, ci, hi, wi);
                    let xh = cache.xhat.at(ni, ci, hi, wi);
                    *dx.at_mut(ni, ci, hi, wi) = scale * (m * g - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}

pub fn relu<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    y
}

pub fn relu_backward<S: Scalar>(x: &Tensor4<S>, dy: &Tensor4<S>) -> Tensor4<S> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= S::zero() {
            *g = S::zero();
        }
    }
    dx
}

/// Softmax over the channel axis, independently per (n, i, j).
pub fn softmax_per_pixel<S: Scalar>(logits: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h, w) = logits.dims();
    let mut y = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let mut max = logits.at(ni, 0, hi, wi);
                for ci in 1..c {
                    max = max.max(logits.at(ni, ci, hi, wi));
                }
                let mut denom = S::zero();
                for ci in 0..c {
                    let e = (logits.at(ni, ci, hi, wi) - max).exp();
                    *y.at_mut(ni, ci, hi, wi) = e;
                    denom += e;
                }
                for ci in 0..c {
                    *y.at_mut(ni, ci, hi, wi) /= denom;
                }
            }
        }
    }
    y
}

/// dx = y * (dy - sum_c(dy * y)) per pixel, where y = softmax(x).
pub fn softmax_backward<S: Scalar>(y: &Tensor4<S>, dy: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h, w) = y.dims();
    let mut dx = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let mut dot = S::zero();
                for ci in 0..c {
                    dot += dy.at(ni, ci, hi, wi) * y.at(ni, ci, hi, wi);
                }
                for ci in 0..c {
                    *dx.at_mut(ni, ci, hi, wi) =
                        y.at(ni, ci, hi, wi) * (dy.at(ni, ci, hi, wi) - dot);
                }
            }
        }
    }
    dx
}

const UPSAMPLE_FACTORS: [usize; 4] = [2, 4, 8, 16];

// Bilinear source taps for one output row/col index under the
// align-corners-false convention, borders clamped.
fn upsample_taps(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let pos = pos.clamp(0.0, src_len as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Upsamples H and W by an integer factor in {2, 4, 8, 16}.
pub fn bilinear_upsample<S: Scalar>(x: &Tensor4<S>, factor: usize) -> Result<Tensor4<S>, NnError> {
    if !UPSAMPLE_FACTORS.contains(&factor) {
        return Err(NnError::InvalidFactor(factor));
    }
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Tensor4::zeros(n, c, oh, ow);
    for oy in 0..oh {
        let (y0, y1, fy) = upsample_taps(oy, factor, h);
        let (fy, gy) = (S::from_f64(fy), S::from_f64(1.0 - fy));
        for ox in 0..ow {
            let (x0, x1, fx) = upsample_taps(ox, factor, w);
            let (fx, gx) = (S::from_f64(fx), S::from_f64(1.0 - fx));
            for ni in 0..n {
                for ci in 0..c {
                    let v = gy * (gx * x.at(ni, ci, y0, x0) + fx * x.at(ni, ci, y0, x1))
                        + fy * (gx * x.at(ni, ci, y1, x0) + fx * x.at(ni, ci, y1, x1));
                    *y.at_mut(ni, ci, oy, ox) = v;
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`bilinear_upsample`]: scatter-adds each output gradient back
/// to its four source taps.
pub fn bilinear_upsample_backward<S: Scalar>(
    dy: &Tensor4<S>,
    factor: usize,
    src_h: usize,
    src_w: usize,
) -> Result<Tensor4<S>, NnError> {
    if !UPSAMPLE_FACTORS.contains(&factor) {
        return Err(NnError::InvalidFactor(factor));
    }
    let (n, c, oh, ow) = dy.dims();
    if oh != src_h * factor || ow != src_w * factor {
        return Err(NnError::ShapeMismatch(format!(
            "dy {oh}x{ow} is not {factor}x of source {src_h}x{src_w}"
        )));
    }
    let mut dx = Tensor4::zeros(n, c, src_h, src_w);
    for oy in 0..oh {
        let (y0, y1, fy) = upsample_taps(oy, factor, src_h);
        let (fy, gy) = (S::from_f64(fy), S::from_f64(1.0 - fy));
        for ox in 0..ow {
            let (x0, x1, fx) = upsample_taps(ox, factor, src_w);
            let (fx, gx) = (S::from_f64(fx), S::from_f64(1.0 - fx));
            for ni in 0..n {
                for ci in 0..c {
                    let g = dy.at(ni, ci, oy, ox);
                    *dx.at_mut(ni, ci, y0, x0) += gy * gx * g;
                    *dx.at_mut(ni, ci, y0, x1) += gy * fx * g;
                    *dx.at_mut(ni, ci, y1, x0) += fy * gx * g;
                    *dx.at_mut(ni, ci, y1, x1) += fy * fx * g;
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over the spatial dims: (N,C,H,W) -> (N,C,1,1).
pub fn global_avg_pool<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h, w) = x.dims();
    let m = S::from_f64((h * w) as f64);
    Tensor4::from_fn(n, c, 1, 1, |ni, ci, _, _| {
        let mut acc = S::zero();
        for hi in 0..h {
            for wi in 0..w {
                acc += x.at(ni, ci, hi, wi);
            }
        }
        acc / m
    })
}

pub fn global_avg_pool_backward<S: Scalar>(
    dy: &Tensor4<S>,
    src_h: usize,
    src_w: usize,
) -> Tensor4<S> {
    let (n, c, _, _) = dy.dims();
    let m = S::from_f64((src_h * src_w) as f64);
    Tensor4::from_fn(n, c, src_h, src_w, |ni, ci, _, _| dy.at(ni, ci, 0, 0) / m)
}
