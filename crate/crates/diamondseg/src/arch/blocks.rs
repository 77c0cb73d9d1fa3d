//! Composable layers with cached forwards and exact backwards.

use std::collections::HashMap;

use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, depthwise_backward,
    depthwise_forward, relu, relu_backward, BatchNorm, BnCache, BnMode, Conv2d, NnError, Scalar,
    Tensor4, WeightRecord,
};
use crate::seed::derive_seed;

/// Hands out one derived seed per layer so weight init is reproducible and
/// order-stable.
pub(crate) struct SeedSeq {
    base: u64,
    counter: u64,
}

impl SeedSeq {
    pub fn new(base: u64) -> Self {
        SeedSeq { base, counter: 0 }
    }

    pub fn next(&mut self) -> u64 {
        let s = derive_seed(self.base, &[0xA2C4, self.counter]);
        self.counter += 1;
        s
    }
}

/// Conv (dense or depthwise) with optional batch norm and optional relu.
#[derive(Debug, Clone)]
pub(crate) struct ConvLayer<S: Scalar> {
    pub conv: Conv2d<S>,
    pub bn: Option<BatchNorm<S>>,
    pub relu: bool,
    pub depthwise: bool,
}

pub(crate) struct LayerCache<S: Scalar> {
    pub x: Tensor4<S>,
    bn: Option<BnCache<S>>,
    pre_relu: Option<Tensor4<S>>,
}

pub(crate) struct LayerGrads<S: Scalar> {
    dweight: Tensor4<S>,
    dbias: Vec<S>,
    dgamma: Option<Vec<S>>,
    dbeta: Option<Vec<S>>,
}

impl<S: Scalar> LayerGrads<S> {
    pub fn push_into(self, out: &mut Vec<Vec<S>>) {
        out.push(self.dweight.into_data());
        out.push(self.dbias);
        if let Some(g) = self.dgamma {
            out.push(g);
        }
        if let Some(b) = self.dbeta {
            out.push(b);
        }
    }
}

impl<S: Scalar> ConvLayer<S> {
    pub fn dense(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        norm: bool,
        relu: bool,
        seed: u64,
    ) -> Self {
        ConvLayer {
            conv: Conv2d::he(c_out, c_in, k, stride, dilation, seed),
            bn: norm.then(|| BatchNorm::new(c_out)),
            relu,
            depthwise: false,
        }
    }

    pub fn depthwise(channels: usize, stride: usize, dilation: usize, seed: u64) -> Self {
        ConvLayer {
            conv: Conv2d::he_depthwise(channels, 3, stride, dilation, seed),
            bn: Some(BatchNorm::new(channels)),
            relu: true,
            depthwise: true,
        }
    }

    /// Bare 1x1 projection to class scores: no norm, no activation.
    ///
    /// Weights and bias start at zero so every score map begins as a
    /// uniform prediction; this matters where several heads are summed,
    /// which otherwise starts from the sum of independent random maps.
    /// A linear output layer needs no random symmetry breaking: per-class
    /// gradients already differ.
    pub fn head(num_classes: usize, c_in: usize) -> Self {
        let mut layer = Self::dense(num_classes, c_in, 1, 1, 1, false, false, 0);
        for v in layer.conv.weight.data_mut() {
            *v = S::zero();
        }
        layer
    }

    fn conv_forward(&self, x: &Tensor4<S>) -> Result<Tensor4<S>, NnError> {
        if self.depthwise {
            depthwise_forward(x, &self.conv)
        } else {
            conv2d_forward(x, &self.conv)
        }
    }

    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<Tensor4<S>, NnError> {
        let mut y = self.conv_forward(x)?;
        if let Some(bn) = self.bn.as_mut() {
            y = batchnorm_forward(&y, bn, mode)?.0;
        }
        Ok(if self.relu { relu(&y) } else { y })
    }

    /// Train-mode forward that keeps everything the backward pass needs.
    pub fn forward_cached(&mut self, x: &Tensor4<S>) -> Result<(Tensor4<S>, LayerCache<S>), NnError> {
        let mut y = self.conv_forward(x)?;
        let bn = match self.bn.as_mut() {
            Some(bn) => {
                let (normed, cache) = batchnorm_forward(&y, bn, BnMode::Train)?;
                y = normed;
                cache
            }
            None => None,
        };
        let pre_relu = self.relu.then(|| y.clone());
        let out = if self.relu { relu(&y) } else { y };
        Ok((out, LayerCache { x: x.clone(), bn, pre_relu }))
    }

    pub fn backward(
        &self,
        cache: &LayerCache<S>,
        dy: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, LayerGrads<S>), NnError> {
        let mut d = match &cache.pre_relu {
            Some(pre) => relu_backward(pre, dy),
            None => dy.clone(),
        };
        let (dgamma, dbeta) = match (&self.bn, &cache.bn) {
            (Some(bn), Some(bnc)) => {
                let g = batchnorm_backward(bn, bnc, &d)?;
                d = g.dx;
                (Some(g.dgamma), Some(g.dbeta))
            }
            (None, None) => (None, None),
            _ => {
                return Err(NnError::ShapeMismatch(
                    "batchnorm cache does not match layer".into(),
                ))
            }
        };
        let grads = if self.depthwise {
            depthwise_backward(&cache.x, &self.conv, &d)?
        } else {
            conv2d_backward(&cache.x, &self.conv, &d)?
        };
        Ok((
            grads.dx,
            LayerGrads {
                dweight: grads.dweight,
                dbias: grads.dbias,
                dgamma,
                dbeta,
            },
        ))
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        out.push(self.conv.weight.data_mut());
        out.push(self.conv.bias.as_mut_slice());
        if let Some(bn) = self.bn.as_mut() {
            out.push(bn.gamma.as_mut_slice());
            out.push(bn.beta.as_mut_slice());
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.conv.weight.numel() + self.conv.bias.len();
        if let Some(bn) = &self.bn {
            n += bn.gamma.len() + bn.beta.len();
        }
        n
    }

    pub fn records(&self, prefix: &str, out: &mut Vec<WeightRecord>) {
        out.push(WeightRecord::from_tensor(&format!("{prefix}.weight"), &self.conv.weight));
        out.push(vec_record(&format!("{prefix}.bias"), &self.conv.bias));
        if let Some(bn) = &self.bn {
            out.push(vec_record(&format!("{prefix}.gamma"), &bn.gamma));
            out.push(vec_record(&format!("{prefix}.beta"), &bn.beta));
            out.push(vec_record(&format!("{prefix}.running_mean"), &bn.running_mean));
            out.push(vec_record(&format!("{prefix}.running_var"), &bn.running_var));
        }
    }

    pub fn load(
        &mut self,
        prefix: &str,
        map: &HashMap<&str, &WeightRecord>,
        used: &mut usize,
    ) -> Result<(), NnError> {
        load_tensor(&mut self.conv.weight, &format!("{prefix}.weight"), map, used)?;
        load_vec(&mut self.conv.bias, &format!("{prefix}.bias"), map, used)?;
        if let Some(bn) = self.bn.as_mut() {
            load_vec(&mut bn.gamma, &format!("{prefix}.gamma"), map, used)?;
            load_vec(&mut bn.beta, &format!("{prefix}.beta"), map, used)?;
            load_vec(&mut bn.running_mean, &format!("{prefix}.running_mean"), map, used)?;
            load_vec(&mut bn.running_var, &format!("{prefix}.running_var"), map, used)?;
        }
        Ok(())
    }
}

/// Depthwise 3x3 + BN + ReLU followed by pointwise 1x1 + BN + ReLU.
#[derive(Debug, Clone)]
pub(crate) struct DwSep<S: Scalar> {
    pub dw: ConvLayer<S>,
    pub pw: ConvLayer<S>,
}

pub(crate) struct DwSepCache<S: Scalar> {
    dw: LayerCache<S>,
    pw: LayerCache<S>,
}

impl<S: Scalar> DwSep<S> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, dilation: usize, seeds: &mut SeedSeq) -> Self {
        DwSep {
            dw: ConvLayer::depthwise(c_in, stride, dilation, seeds.next()),
            pw: ConvLayer::dense(c_out, c_in, 1, 1, 1, true, true, seeds.next()),
        }
    }

    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<Tensor4<S>, NnError> {
        let mid = self.dw.forward(x, mode)?;
        self.pw.forward(&mid, mode)
    }

    pub fn forward_cached(&mut self, x: &Tensor4<S>) -> Result<(Tensor4<S>, DwSepCache<S>), NnError> {
        let (mid, dwc) = self.dw.forward_cached(x)?;
        let (out, pwc) = self.pw.forward_cached(&mid)?;
        Ok((out, DwSepCache { dw: dwc, pw: pwc }))
    }

    pub fn backward(
        &self,
        cache: &DwSepCache<S>,
        dy: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, (LayerGrads<S>, LayerGrads<S>)), NnError> {
        let (d_mid, g_pw) = self.pw.backward(&cache.pw, dy)?;
        let (dx, g_dw) = self.dw.backward(&cache.dw, &d_mid)?;
        Ok((dx, (g_dw, g_pw)))
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        self.dw.collect_params(out);
        self.pw.collect_params(out);
    }

    pub fn param_count(&self) -> usize {
        self.dw.param_count() + self.pw.param_count()
    }

    pub fn records(&self, prefix: &str, out: &mut Vec<WeightRecord>) {
        self.dw.records(&format!("{prefix}.dw"), out);
        self.pw.records(&format!("{prefix}.pw"), out);
    }

    pub fn load(
        &mut self,
        prefix: &str,
        map: &HashMap<&str, &WeightRecord>,
        used: &mut usize,
    ) -> Result<(), NnError> {
        self.dw.load(&format!("{prefix}.dw"), map, used)?;
        self.pw.load(&format!("{prefix}.pw"), map, used)
    }
}

fn vec_record<S: Scalar>(name: &str, v: &[S]) -> WeightRecord {
    let data: Vec<f32> = v.iter().map(|x| x.as_f64() as f32).collect();
    WeightRecord::from_vec(name, &data)
}

fn fetch<'m>(
    map: &HashMap<&str, &'m WeightRecord>,
    name: &str,
    used: &mut usize,
) -> Result<&'m WeightRecord, NnError> {
    *used += 1;
    map.get(name)
        .copied()
        .ok_or_else(|| NnError::WeightFormat(format!("missing tensor {name:?}")))
}

fn load_tensor<S: Scalar>(
    dst: &mut Tensor4<S>,
    name: &str,
    map: &HashMap<&str, &WeightRecord>,
    used: &mut usize,
) -> Result<(), NnError> {
    let rec = fetch(map, name, used)?;
    let (n, c, h, w) = dst.dims();
    if rec.dims != [n as u32, c as u32, h as u32, w as u32] {
        return Err(NnError::WeightFormat(format!(
            "tensor {name:?} has dims {:?}, model expects ({n},{c},{h},{w})",
            rec.dims
        )));
    }
    for (d, &s) in dst.data_mut().iter_mut().zip(&rec.data) {
        *d = S::from_f64(s as f64);
    }
    Ok(())
}

fn load_vec<S: Scalar>(
    dst: &mut Vec<S>,
    name: &str,
    map: &HashMap<&str, &WeightRecord>,
    used: &mut usize,
) -> Result<(), NnError> {
    let rec = fetch(map, name, used)?;
    if rec.data.len() != dst.len() {
        return Err(NnError::WeightFormat(format!(
            "tensor {name:?} has {} values, model expects {}",
            rec.data.len(),
            dst.len()
        )));
    }
    for (d, &s) in dst.iter_mut().zip(&rec.data) {
        *d = S::from_f64(s as f64);
    }
    Ok(())
}

pub(crate) fn concat_channels<S: Scalar>(parts: &[&Tensor4<S>]) -> Result<Tensor4<S>, NnError> {
    let (n, _, h, w) = parts[0].dims();
    let mut c_total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims();
        if (pn, ph, pw) != (n, h, w) {
            return Err(NnError::ShapeMismatch(format!(
                "concat parts disagree: ({pn},{ph},{pw}) vs ({n},{h},{w})"
            )));
        }
        c_total += pc;
    }
    let mut out = Tensor4::zeros(n, c_total, h, w);
    let plane = h * w;
    for ni in 0..n {
        let mut offset = 0;
        for p in parts {
            let pc = p.dims().1;
            let src = &p.data()[ni * pc * plane..(ni + 1) * pc * plane];
            let base = (ni * c_total + offset) * plane;
            out.data_mut()[base..base + pc * plane].copy_from_slice(src);
            offset += pc;
        }
    }
    Ok(out)
}

pub(crate) fn split_channels<S: Scalar>(t: &Tensor4<S>, widths: &[usize]) -> Vec<Tensor4<S>> {
    let (n, c, h, w) = t.dims();
    assert_eq!(widths.iter().sum::<usize>(), c, "split widths must cover all channels");
    let plane = h * w;
    let mut parts = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &pc in widths {
        let mut part = Tensor4::zeros(n, pc, h, w);
        for ni in 0..n {
            let base = (ni * c + offset) * plane;
            part.data_mut()[ni * pc * plane..(ni + 1) * pc * plane]
                .copy_from_slice(&t.data()[base..base + pc * plane]);
        }
        parts.push(part);
        offset += pc;
    }
    parts
}

/// Tiles a (N,C,1,1) tensor across the spatial dims. Equivalent to bilinear
/// interpolation from a single source pixel.
pub(crate) fn broadcast_spatial<S: Scalar>(t: &Tensor4<S>, h: usize, w: usize) -> Tensor4<S> {
    let (n, c, _, _) = t.dims();
    Tensor4::from_fn(n, c, h, w, |ni, ci, _, _| t.at(ni, ci, 0, 0))
}

/// Adjoint of [`broadcast_spatial`]: sums gradients over the spatial dims.
pub(crate) fn broadcast_spatial_backward<S: Scalar>(dy: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h, w) = dy.dims();
    Tensor4::from_fn(n, c, 1, 1, |ni, ci, _, _| {
        let mut acc = S::zero();
        for hi in 0..h {
            for wi in 0..w {
                acc += dy.at(ni, ci, hi, wi);
            }
        }
        acc
    })
}

pub(crate) fn add_tensors<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Result<Tensor4<S>, NnError> {
    if a.dims() != b.dims() {
        return Err(NnError::ShapeMismatch(format!(
            "cannot add {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub(crate) fn add_assign<S: Scalar>(a: &mut Tensor4<S>, b: &Tensor4<S>) {
    debug_assert_eq!(a.dims(), b.dims());
    for (o, &v) in a.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
}
