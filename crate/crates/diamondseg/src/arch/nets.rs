//! The three segmentation network families over a shared encoder.

use std::collections::HashMap;

use super::blocks::{
    add_assign, add_tensors, broadcast_spatial, broadcast_spatial_backward, concat_channels,
    split_channels, ConvLayer, DwSep, DwSepCache, LayerCache, LayerGrads, SeedSeq,
};
use crate::nn::{
    bilinear_upsample, bilinear_upsample_backward, global_avg_pool, global_avg_pool_backward,
    BnMode, NnError, Scalar, Tensor4, WeightRecord,
};

/// Channel widths derived from the configured base width.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Widths {
    pub w0: usize,
    pub w1: usize,
    pub w2: usize,
    pub w3: usize,
    pub w4: usize,
    pub aspp: usize,
    pub low: usize,
}

impl Widths {
    pub fn from_base(base: usize) -> Self {
        Widths {
            w0: base,
            w1: base * 3 / 2,
            w2: base * 2,
            w3: base * 3,
            w4: base * 4,
            aspp: base * 2,
            low: base,
        }
    }
}

/// Depthwise-separable encoder: stem /2, then paired blocks stepping to /4,
/// /8, /16 and a final stage that either strides to /32 (FCN) or holds /16
/// with dilation 2 (DeepLab variants).
pub(crate) struct Encoder<S: Scalar> {
    stem: ConvLayer<S>,
    blocks: Vec<DwSep<S>>,
}

pub(crate) struct EncTaps<S: Scalar> {
    pub t4: Tensor4<S>,
    pub t8: Tensor4<S>,
    pub t16: Tensor4<S>,
    pub out: Tensor4<S>,
}

pub(crate) struct EncoderCache<S: Scalar> {
    stem: LayerCache<S>,
    blocks: Vec<DwSepCache<S>>,
}

pub(crate) struct EncoderGrads<S: Scalar> {
    stem: LayerGrads<S>,
    blocks: Vec<(LayerGrads<S>, LayerGrads<S>)>,
}

impl<S: Scalar> EncoderGrads<S> {
    fn push_all(self, out: &mut Vec<Vec<S>>) {
        self.stem.push_into(out);
        for (dw, pw) in self.blocks {
            dw.push_into(out);
            pw.push_into(out);
        }
    }
}

// Junction indices: the input of blocks[i] is a tap for these i values.
const TAP16_BLOCK: usize = 6;
const TAP8_BLOCK: usize = 4;
const TAP4_BLOCK: usize = 2;

impl<S: Scalar> Encoder<S> {
    pub fn new(widths: Widths, stride_to_32: bool, seeds: &mut SeedSeq) -> Self {
        let Widths { w0, w1, w2, w3, w4, .. } = widths;
        let (s4_stride, s4_dilation) = if stride_to_32 { (2, 1) } else { (1, 2) };
        let stem = ConvLayer::dense(w0, 1, 3, 2, 1, true, true, seeds.next());
        let blocks = vec![
            DwSep::new(w0, w1, 2, 1, seeds), // 0: /4
            DwSep::new(w1, w1, 1, 1, seeds), // 1
            DwSep::new(w1, w2, 2, 1, seeds), // 2: /8
            DwSep::new(w2, w2, 1, 1, seeds), // 3
            DwSep::new(w2, w3, 2, 1, seeds), // 4: /16
            DwSep::new(w3, w3, 1, 1, seeds), // 5
            DwSep::new(w3, w4, s4_stride, s4_dilation, seeds), // 6: /32 or dilated /16
            DwSep::new(w4, w4, 1, s4_dilation, seeds),         // 7
        ];
        Encoder { stem, blocks }
    }

    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<EncTaps<S>, NnError> {
        let mut y = self.stem.forward(x, mode)?;
        let mut t4 = None;
        let mut t8 = None;
        let mut t16 = None;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            y = b.forward(&y, mode)?;
            match i + 1 {
                TAP4_BLOCK => t4 = Some(y.clone()),
                TAP8_BLOCK => t8 = Some(y.clone()),
                TAP16_BLOCK => t16 = Some(y.clone()),
                _ => {}
            }
        }
        Ok(EncTaps {
            t4: t4.unwrap(),
            t8: t8.unwrap(),
            t16: t16.unwrap(),
            out: y,
        })
    }

    pub fn forward_cached(
        &mut self,
        x: &Tensor4<S>,
    ) -> Result<(EncTaps<S>, EncoderCache<S>), NnError> {
        let (mut y, stem_cache) = self.stem.forward_cached(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut t4 = None;
        let mut t8 = None;
        let mut t16 = None;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (next, cache) = b.forward_cached(&y)?;
            caches.push(cache);
            y = next;
            match i + 1 {
                TAP4_BLOCK => t4 = Some(y.clone()),
                TAP8_BLOCK => t8 = Some(y.clone()),
                TAP16_BLOCK => t16 = Some(y.clone()),
                _ => {}
            }
        }
        Ok((
            EncTaps {
                t4: t4.unwrap(),
                t8: t8.unwrap(),
                t16: t16.unwrap(),
                out: y,
            },
            EncoderCache { stem: stem_cache, blocks: caches },
        ))
    }

    /// Backward from the encoder output, injecting extra gradients at the
    /// tapped junctions on the way down.
    pub fn backward(
        &self,
        cache: &EncoderCache<S>,
        d_out: &Tensor4<S>,
        d_t16: Option<&Tensor4<S>>,
        d_t8: Option<&Tensor4<S>>,
        d_t4: Option<&Tensor4<S>>,
    ) -> Result<EncoderGrads<S>, NnError> {
        let mut d = d_out.clone();
        let mut grads: Vec<Option<(LayerGrads<S>, LayerGrads<S>)>> =
            (0..self.blocks.len()).map(|_| None).collect();
        for i in (0..self.blocks.len()).rev() {
            let (dx, g) = self.blocks[i].backward(&cache.blocks[i], &d)?;
            grads[i] = Some(g);
            d = dx;
            match (i, d_t16, d_t8, d_t4) {
                (TAP16_BLOCK, Some(t), _, _) => add_assign(&mut d, t),
                (TAP8_BLOCK, _, Some(t), _) => add_assign(&mut d, t),
                (TAP4_BLOCK, _, _, Some(t)) => add_assign(&mut d, t),
                _ => {}
            }
        }
        let (_, stem_grads) = self.stem.backward(&cache.stem, &d)?;
        Ok(EncoderGrads {
            stem: stem_grads,
            blocks: grads.into_iter().map(|g| g.unwrap()).collect(),
        })
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        self.stem.collect_params(out);
        for b in &mut self.blocks {
            b.collect_params(out);
        }
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
    }

    pub fn records(&self, out: &mut Vec<WeightRecord>) {
        self.stem.records("stem", out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.records(&format!("enc{i}"), out);
        }
    }

    pub fn load(
        &mut self,
        map: &HashMap<&str, &WeightRecord>,
        used: &mut usize,
    ) -> Result<(), NnError> {
        self.stem.load("stem", map, used)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.load(&format!("enc{i}"), map, used)?;
        }
        Ok(())
    }
}

/// Atrous spatial pyramid pooling: 1x1, dilated 3x3 branches, and a pooled
/// image-level branch, concatenated and projected.
pub(crate) struct Aspp<S: Scalar> {
    b0: ConvLayer<S>,
    atrous: Vec<ConvLayer<S>>,
    gap: ConvLayer<S>,
    proj: ConvLayer<S>,
    width: usize,
}

pub(crate) struct AsppCache<S: Scalar> {
    b0: LayerCache<S>,
    atrous: Vec<LayerCache<S>>,
    gap: LayerCache<S>,
    proj: LayerCache<S>,
    in_hw: (usize, usize),
}

pub(crate) struct AsppGrads<S: Scalar> {
    b0: LayerGrads<S>,
    atrous: Vec<LayerGrads<S>>,
    gap: LayerGrads<S>,
    proj: LayerGrads<S>,
}

impl<S: Scalar> AsppGrads<S> {
    fn push_all(self, out: &mut Vec<Vec<S>>) {
        self.b0.push_into(out);
        for g in self.atrous {
            g.push_into(out);
        }
        self.gap.push_into(out);
        self.proj.push_into(out);
    }
}

impl<S: Scalar> Aspp<S> {
    pub fn new(c_in: usize, width: usize, rates: &[usize], seeds: &mut SeedSeq) -> Self {
        let b0 = ConvLayer::dense(width, c_in, 1, 1, 1, true, true, seeds.next());
        let atrous = rates
            .iter()
            .map(|&r| ConvLayer::dense(width, c_in, 3, 1, r, true, true, seeds.next()))
            .collect();
        // The pooled branch sees (N,C,1,1) activations; batch norm over a
        // single spatial position is degenerate, so it is conv + relu only.
        let gap = ConvLayer::dense(width, c_in, 1, 1, 1, false, true, seeds.next());
        let branches = rates.len() + 2;
        let proj = ConvLayer::dense(width, branches * width, 1, 1, 1, true, true, seeds.next());
        Aspp { b0, atrous, gap, proj, width }
    }

    pub fn branch_count(&self) -> usize {
        self.atrous.len() + 2
    }

    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<Tensor4<S>, NnError> {
        let (_, _, h, w) = x.dims();
        let mut parts = vec![self.b0.forward(x, mode)?];
        for a in &mut self.atrous {
            parts.push(a.forward(x, mode)?);
        }
        let pooled = self.gap.forward(&global_avg_pool(x), mode)?;
        parts.push(broadcast_spatial(&pooled, h, w));
        let refs: Vec<&Tensor4<S>> = parts.iter().collect();
        self.proj.forward(&concat_channels(&refs)?, mode)
    }

    pub fn forward_cached(
        &mut self,
        x: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, AsppCache<S>), NnError> {
        let (_, _, h, w) = x.dims();
        let (y0, c0) = self.b0.forward_cached(x)?;
        let mut parts = vec![y0];
        let mut atrous_caches = Vec::with_capacity(self.atrous.len());
        for a in &mut self.atrous {
            let (y, c) = a.forward_cached(x)?;
            parts.push(y);
            atrous_caches.push(c);
        }
        let (pooled, gap_cache) = self.gap.forward_cached(&global_avg_pool(x))?;
        parts.push(broadcast_spatial(&pooled, h, w));
        let refs: Vec<&Tensor4<S>> = parts.iter().collect();
        let (out, proj_cache) = self.proj.forward_cached(&concat_channels(&refs)?)?;
        Ok((
            out,
            AsppCache {
                b0: c0,
                atrous: atrous_caches,
                gap: gap_cache,
                proj: proj_cache,
                in_hw: (h, w),
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &AsppCache<S>,
        dy: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, AsppGrads<S>), NnError> {
        let (d_cat, g_proj) = self.proj.backward(&cache.proj, dy)?;
        let widths = vec![self.width; self.branch_count()];
        let mut parts = split_channels(&d_cat, &widths);
        let d_pool_wide = parts.pop().unwrap();

        let (mut d_x, g_b0) = self.b0.backward(&cache.b0, &parts[0])?;
        let mut g_atrous = Vec::with_capacity(self.atrous.len());
        for (i, a) in self.atrous.iter().enumerate() {
            let (dx, g) = a.backward(&cache.atrous[i], &parts[i + 1])?;
            add_assign(&mut d_x, &dx);
            g_atrous.push(g);
        }
        let d_pooled = broadcast_spatial_backward(&d_pool_wide);
        let (d_gap_in, g_gap) = self.gap.backward(&cache.gap, &d_pooled)?;
        let (h, w) = cache.in_hw;
        add_assign(&mut d_x, &global_avg_pool_backward(&d_gap_in, h, w));
        Ok((d_x, AsppGrads { b0: g_b0, atrous: g_atrous, gap: g_gap, proj: g_proj }))
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        self.b0.collect_params(out);
        for a in &mut self.atrous {
            a.collect_params(out);
        }
        self.gap.collect_params(out);
        self.proj.collect_params(out);
    }

    pub fn param_count(&self) -> usize {
        self.b0.param_count()
            + self.atrous.iter().map(|a| a.param_count()).sum::<usize>()
            + self.gap.param_count()
            + self.proj.param_count()
    }

    pub fn records(&self, out: &mut Vec<WeightRecord>) {
        self.b0.records("aspp.b0", out);
        for (i, a) in self.atrous.iter().enumerate() {
            a.records(&format!("aspp.r{i}"), out);
        }
        self.gap.records("aspp.gap", out);
        self.proj.records("aspp.proj", out);
    }

    pub fn load(
        &mut self,
        map: &HashMap<&str, &WeightRecord>,
        used: &mut usize,
    ) -> Result<(), NnError> {
        self.b0.load("aspp.b0", map, used)?;
        for (i, a) in self.atrous.iter_mut().enumerate() {
            a.load(&format!("aspp.r{i}"), map, used)?;
        }
        self.gap.load("aspp.gap", map, used)?;
        self.proj.load("aspp.proj", map, used)
    }
}

/// Per-stage class scores fused coarse-to-fine, then upsampled 8x.
pub(crate) struct Fcn8Net<S: Scalar> {
    enc: Encoder<S>,
    score8: ConvLayer<S>,
    score16: ConvLayer<S>,
    score32: ConvLayer<S>,
}

pub(crate) struct Fcn8Cache<S: Scalar> {
    enc: EncoderCache<S>,
    s8: LayerCache<S>,
    s16: LayerCache<S>,
    s32: LayerCache<S>,
}

impl<S: Scalar> Fcn8Net<S> {
    pub fn new(widths: Widths, num_classes: usize, seeds: &mut SeedSeq) -> Self {
        let enc = Encoder::new(widths, true, seeds);
        Fcn8Net {
            enc,
            score8: ConvLayer::head(num_classes, widths.w2),
            score16: ConvLayer::head(num_classes, widths.w3),
            score32: ConvLayer::head(num_classes, widths.w4),
        }
    }

    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<Tensor4<S>, NnError> {
        let taps = self.enc.forward(x, mode)?;
        let s32 = self.score32.forward(&taps.out, mode)?;
        let s16 = self.score16.forward(&taps.t16, mode)?;
        let s8 = self.score8.forward(&taps.t8, mode)?;
        let f16 = add_tensors(&bilinear_upsample(&s32, 2)?, &s16)?;
        let f8 = add_tensors(&bilinear_upsample(&f16, 2)?, &s8)?;
        bilinear_upsample(&f8, 8)
    }

    pub fn forward_cached(
        &mut self,
        x: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, Fcn8Cache<S>), NnError> {
        let (taps, enc_cache) = self.enc.forward_cached(x)?;
        let (s32, c32) = self.score32.forward_cached(&taps.out)?;
        let (s16, c16) = self.score16.forward_cached(&taps.t16)?;
        let (s8, c8) = self.score8.forward_cached(&taps.t8)?;
        let f16 = add_tensors(&bilinear_upsample(&s32, 2)?, &s16)?;
        let f8 = add_tensors(&bilinear_upsample(&f16, 2)?, &s8)?;
        let logits = bilinear_upsample(&f8, 8)?;
        Ok((logits, Fcn8Cache { enc: enc_cache, s8: c8, s16: c16, s32: c32 }))
    }

    pub fn backward(
        &self,
        cache: &Fcn8Cache<S>,
        dlogits: &Tensor4<S>,
    ) -> Result<Vec<Vec<S>>, NnError> {
        let (_, _, h8, w8) = cache.s8.x.dims();
        let (_, _, h16, w16) = cache.s16.x.dims();
        let (_, _, h32, w32) = cache.s32.x.dims();
        let d_f8 = bilinear_upsample_backward(dlogits, 8, h8, w8)?;
        let d_f16 = bilinear_upsample_backward(&d_f8, 2, h16, w16)?;
        let d_s32 = bilinear_upsample_backward(&d_f16, 2, h32, w32)?;
        let (d_t8, g_s8) = self.score8.backward(&cache.s8, &d_f8)?;
        let (d_t16, g_s16) = self.score16.backward(&cache.s16, &d_f16)?;
        let (d_out, g_s32) = self.score32.backward(&cache.s32, &d_s32)?;
        let enc_grads =
            self.enc.backward(&cache.enc, &d_out, Some(&d_t16), Some(&d_t8), None)?;
        let mut out = Vec::new();
        enc_grads.push_all(&mut out);
        g_s8.push_into(&mut out);
        g_s16.push_into(&mut out);
        g_s32.push_into(&mut out);
        Ok(out)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        self.enc.collect_params(out);
        self.score8.collect_params(out);
        self.score16.collect_params(out);
        self.score32.collect_params(out);
    }

    pub fn param_count(&self) -> usize {
        self.enc.param_count()
            + self.score8.param_count()
            + self.score16.param_count()
            + self.score32.param_count()
    }

    pub fn records(&self, out: &mut Vec<WeightRecord>) {
        self.enc.records(out);
        self.score8.records("score8", out);
        self.score16.records("score16", out);
        self.score32.records("score32", out);
    }

    pub fn load(
        &mut self,
        map: &HashMap<&str, &WeightRecord>,
        used: &mut usize,
    ) -> Result<(), NnError> {
        self.enc.load(map, used)?;
        self.score8.load("score8", map, used)?;
        self.score16.load("score16", map, used)?;
        self.score32.load("score32", map, used)
    }
}

/// Dilated encoder at output stride 16, ASPP, classifier, 16x upsample.
pub(crate) struct DeeplabV3Net<S: Scalar> {
    enc: Encoder<S>,
    pub(crate) aspp: Aspp<S>,
    classifier: ConvLayer<S>,
}

pub(crate) struct DeeplabV3Cache<S: Scalar> {
    enc: EncoderCache<S>,
    aspp: AsppCache<S>,
    cls: LayerCache<S>,
}

impl<S: Scalar> DeeplabV3Net<S> {
    pub fn new(widths: Widths, num_classes: usize, rates: &[usize], seeds: &mut SeedSeq) -> Self {
        let enc = Encoder::new(widths, false, seeds);
        let aspp = Aspp::new(widths.w4, widths.aspp, rates, seeds);
        DeeplabV3Net {
            enc,
            aspp,
            classifier: ConvLayer::head(num_classes, widths.aspp),
        }
    }

    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<Tensor4<S>, NnError> {
        let taps = self.enc.forward(x, mode)?;
        let y = self.aspp.forward(&taps.out, mode)?;
        let s = self.classifier.forward(&y, mode)?;
        bilinear_upsample(&s, 16)
    }

    pub fn forward_cached(
        &mut self,
        x: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, DeeplabV3Cache<S>), NnError> {
        let (taps, enc_cache) = self.enc.forward_cached(x)?;
        let (y, aspp_cache) = self.aspp.forward_cached(&taps.out)?;
        let (s, cls_cache) = self.classifier.forward_cached(&y)?;
        let logits = bilinear_upsample(&s, 16)?;
        Ok((logits, DeeplabV3Cache { enc: enc_cache, aspp: aspp_cache, cls: cls_cache }))
    }

    pub fn backward(
        &self,
        cache: &DeeplabV3Cache<S>,
        dlogits: &Tensor4<S>,
    ) -> Result<Vec<Vec<S>>, NnError> {
        let (_, _, h16, w16) = cache.cls.x.dims();
        let d_s = bilinear_upsample_backward(dlogits, 16, h16, w16)?;
        let (d_y, g_cls) = self.classifier.backward(&cache.cls, &d_s)?;
        let (d_out, g_aspp) = self.aspp.backward(&cache.aspp, &d_y)?;
        let enc_grads = self.enc.backward(&cache.enc, &d_out, None, None, None)?;
        let mut out = Vec::new();
        enc_grads.push_all(&mut out);
        g_aspp.push_all(&mut out);
        g_cls.push_into(&mut out);
        Ok(out)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        self.enc.collect_params(out);
        self.aspp.collect_params(out);
        self.classifier.collect_params(out);
    }

    pub fn param_count(&self) -> usize {
        self.enc.param_count() + self.aspp.param_count() + self.classifier.param_count()
    }

    pub fn records(&self, out: &mut Vec<WeightRecord>) {
        self.enc.records(out);
        self.aspp.records(out);
        self.classifier.records("classifier", out);
    }

    pub fn load(
        &mut self,
        map: &HashMap<&str, &WeightRecord>,
        used: &mut usize,
    ) -> Result<(), NnError> {
        self.enc.load(map, used)?;
        self.aspp.load(map, used)?;
        self.classifier.load("classifier", map, used)
    }
}

/// DeepLabV3 encoder plus a decoder that fuses reduced /4 low-level
/// features before classifying at /4 and upsampling 4x.
pub(crate) struct DeeplabV3PlusNet<S: Scalar> {
    enc: Encoder<S>,
    pub(crate) aspp: Aspp<S>,
    low: ConvLayer<S>,
    refine: ConvLayer<S>,
    classifier: ConvLayer<S>,
    aspp_width: usize,
    low_width: usize,
}

pub(crate) struct DeeplabV3PlusCache<S: Scalar> {
    enc: EncoderCache<S>,
    aspp: AsppCache<S>,
    low: LayerCache<S>,
    refine: LayerCache<S>,
    cls: LayerCache<S>,
    aspp_hw: (usize, usize),
}

impl<S: Scalar> DeeplabV3PlusNet<S> {
    pub fn new(widths: Widths, num_classes: usize, rates: &[usize], seeds: &mut SeedSeq) -> Self {
        let enc = Encoder::new(widths, false, seeds);
        let aspp = Aspp::new(widths.w4, widths.aspp, rates, seeds);
        let low = ConvLayer::dense(widths.low, widths.w1, 1, 1, 1, true, true, seeds.next());
        let refine = ConvLayer::dense(
            widths.aspp,
            widths.aspp + widths.low,
            3,
            1,
            1,
            true,
            true,
            seeds.next(),
        );
        DeeplabV3PlusNet {
            enc,
            aspp,
            low,
            refine,
            classifier: ConvLayer::head(num_classes, widths.aspp),
            aspp_width: widths.aspp,
            low_width: widths.low,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<Tensor4<S>, NnError> {
        let taps = self.enc.forward(x, mode)?;
        let y = self.aspp.forward(&taps.out, mode)?;
        let y4 = bilinear_upsample(&y, 4)?;
        let low4 = self.low.forward(&taps.t4, mode)?;
        let cat = concat_channels(&[&y4, &low4])?;
        let refined = self.refine.forward(&cat, mode)?;
        let s = self.classifier.forward(&refined, mode)?;
        bilinear_upsample(&s, 4)
    }

    pub fn forward_cached(
        &mut self,
        x: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, DeeplabV3PlusCache<S>), NnError> {
        let (taps, enc_cache) = self.enc.forward_cached(x)?;
        let (y, aspp_cache) = self.aspp.forward_cached(&taps.out)?;
        let (_, _, ah, aw) = y.dims();
        let y4 = bilinear_upsample(&y, 4)?;
        let (low4, low_cache) = self.low.forward_cached(&taps.t4)?;
        let cat = concat_channels(&[&y4, &low4])?;
        let (refined, refine_cache) = self.refine.forward_cached(&cat)?;
        let (s, cls_cache) = self.classifier.forward_cached(&refined)?;
        let logits = bilinear_upsample(&s, 4)?;
        Ok((
            logits,
            DeeplabV3PlusCache {
                enc: enc_cache,
                aspp: aspp_cache,
                low: low_cache,
                refine: refine_cache,
                cls: cls_cache,
                aspp_hw: (ah, aw),
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &DeeplabV3PlusCache<S>,
        dlogits: &Tensor4<S>,
    ) -> Result<Vec<Vec<S>>, NnError> {
        let (_, _, h4, w4) = cache.cls.x.dims();
        let d_s = bilinear_upsample_backward(dlogits, 4, h4, w4)?;
        let (d_refined, g_cls) = self.classifier.backward(&cache.cls, &d_s)?;
        let (d_cat, g_refine) = self.refine.backward(&cache.refine, &d_refined)?;
        let parts = split_channels(&d_cat, &[self.aspp_width, self.low_width]);
        let (d_t4, g_low) = self.low.backward(&cache.low, &parts[1])?;
        let (ah, aw) = cache.aspp_hw;
        let d_y = bilinear_upsample_backward(&parts[0], 4, ah, aw)?;
        let (d_out, g_aspp) = self.aspp.backward(&cache.aspp, &d_y)?;
        let enc_grads = self.enc.backward(&cache.enc, &d_out, None, None, Some(&d_t4))?;
        let mut out = Vec::new();
        enc_grads.push_all(&mut out);
        g_aspp.push_all(&mut out);
        g_low.push_into(&mut out);
        g_refine.push_into(&mut out);
        g_cls.push_into(&mut out);
        Ok(out)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        self.enc.collect_params(out);
        self.aspp.collect_params(out);
        self.low.collect_params(out);
        self.refine.collect_params(out);
        self.classifier.collect_params(out);
    }

    pub fn param_count(&self) -> usize {
        self.enc.param_count()
            + self.aspp.param_count()
            + self.low.param_count()
            + self.refine.param_count()
            + self.classifier.param_count()
    }

    pub fn records(&self, out: &mut Vec<WeightRecord>) {
        self.enc.records(out);
        self.aspp.records(out);
        self.low.records("low", out);
        self.refine.records("refine", out);
        self.classifier.records("classifier", out);
    }

    pub fn load(
        &mut self,
        map: &HashMap<&str, &WeightRecord>,
        used: &mut usize,
    ) -> Result<(), NnError> {
        self.enc.load(map, used)?;
        self.aspp.load(map, used)?;
        self.low.load("low", map, used)?;
        self.refine.load("refine", map, used)?;
        self.classifier.load("classifier", map, used)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_produces_expected_scales() {
        let widths = Widths::from_base(16);
        let mut seeds = SeedSeq::new(3);
        let mut enc = Encoder::<f32>::new(widths, true, &mut seeds);
        let x = Tensor4::random_uniform(1, 1, 64, 64, -1.0, 1.0, 4);
        let taps = enc.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(taps.t4.dims(), (1, 24, 16, 16));
        assert_eq!(taps.t8.dims(), (1, 32, 8, 8));
        assert_eq!(taps.t16.dims(), (1, 48, 4, 4));
        assert_eq!(taps.out.dims(), (1, 64, 2, 2));

        let mut seeds = SeedSeq::new(3);
        let mut dilated = Encoder::<f32>::new(widths, false, &mut seeds);
        let taps = dilated.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(taps.out.dims(), (1, 64, 4, 4), "dilated stage keeps /16");
    }

    #[test]
    fn aspp_keeps_duplicate_rate_branches() {
        // Equal rates must still yield rates + 2 concatenated branches.
        let mut seeds = SeedSeq::new(5);
        let mut aspp = Aspp::<f32>::new(64, 32, &[2, 2, 2], &mut seeds);
        assert_eq!(aspp.branch_count(), 5);
        assert_eq!(aspp.proj.conv.weight.dims().1, 5 * 32);
        let x = Tensor4::random_uniform(1, 64, 4, 4, -1.0, 1.0, 6);
        let y = aspp.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(y.dims(), (1, 32, 4, 4));
    }
}
