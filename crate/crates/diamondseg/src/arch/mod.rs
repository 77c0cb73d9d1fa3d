//! Segmentation model families, training, and inference.
//!
//! Three families share a depthwise-separable encoder: `fcn8` fuses
//! per-stage class scores coarse-to-fine, `deeplabv3` applies atrous
//! spatial pyramid pooling at output stride 16, and `deeplabv3plus` adds a
//! decoder that folds reduced /4 low-level features back in. All encoders
//! here are deliberately small; reported parameter counts describe these
//! models only and are not comparable to full-scale published backbones.

mod blocks;
mod nets;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImageData, ImageF32, MaskU8, Sample, NUM_CLASSES};
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::nn::{
    cross_entropy_loss, focal_loss, load_weights, prediction_entropy, save_weights,
    softmax_per_pixel, AdamState, BnMode, FocalLossParams, NnError, Scalar, Tensor4,
    WeightRecord, LR_MAX, LR_MIN,
};
use crate::preprocess::normalize;
use crate::seed::derive_seed;
use blocks::SeedSeq;
use nets::{DeeplabV3Net, DeeplabV3PlusNet, Fcn8Net, Widths};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid architecture config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {0} has no mask")]
    MissingMask(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchFamily {
    Fcn8,
    Deeplabv3,
    Deeplabv3plus,
}

impl ArchFamily {
    pub const ALL: [ArchFamily; 3] =
        [ArchFamily::Fcn8, ArchFamily::Deeplabv3, ArchFamily::Deeplabv3plus];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchFamily::Fcn8 => "fcn8",
            ArchFamily::Deeplabv3 => "deeplabv3",
            ArchFamily::Deeplabv3plus => "deeplabv3plus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fcn8" => Some(ArchFamily::Fcn8),
            "deeplabv3" => Some(ArchFamily::Deeplabv3),
            "deeplabv3plus" => Some(ArchFamily::Deeplabv3plus),
            _ => None,
        }
    }
}

impl fmt::Display for ArchFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub family: ArchFamily,
    pub base_width: usize,
    pub num_classes: usize,
    pub aspp_rates: Vec<usize>,
    pub input_resolution: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            family: ArchFamily::Fcn8,
            base_width: 16,
            num_classes: NUM_CLASSES,
            aspp_rates: vec![1, 2, 4],
            input_resolution: 64,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.num_classes != NUM_CLASSES {
            return Err(ArchError::InvalidConfig(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.base_width < 4 || self.base_width % 2 != 0 {
            return Err(ArchError::InvalidConfig(format!(
                "base_width {} must be an even number >= 4",
                self.base_width
            )));
        }
        if self.input_resolution < 32 || self.input_resolution % 16 != 0 {
            return Err(ArchError::InvalidConfig(format!(
                "input_resolution {} must be a multiple of 16, at least 32",
                self.input_resolution
            )));
        }
        // The stride-to-/32 stage needs all three fused scales commensurate.
        if self.family == ArchFamily::Fcn8 && self.input_resolution % 32 != 0 {
            return Err(ArchError::InvalidConfig(format!(
                "fcn8 needs input_resolution divisible by 32, got {}",
                self.input_resolution
            )));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.iter().any(|&r| r == 0) {
            return Err(ArchError::InvalidConfig(
                "aspp_rates must be non-empty with every rate >= 1".into(),
            ));
        }
        Ok(())
    }
}

enum Net<S: Scalar> {
    Fcn8(Fcn8Net<S>),
    V3(DeeplabV3Net<S>),
    V3Plus(DeeplabV3PlusNet<S>),
}

/// Backprop state captured by a train-mode forward pass.
pub struct Tape<S: Scalar> {
    inner: TapeInner<S>,
}

enum TapeInner<S: Scalar> {
    Fcn8(nets::Fcn8Cache<S>),
    V3(nets::DeeplabV3Cache<S>),
    V3Plus(nets::DeeplabV3PlusCache<S>),
}

pub struct Model<S: Scalar = f32> {
    pub config: ArchConfig,
    net: Net<S>,
}

impl<S: Scalar> Model<S> {
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self, ArchError> {
        config.validate()?;
        let widths = Widths::from_base(config.base_width);
        let mut seeds = SeedSeq::new(seed);
        let net = match config.family {
            ArchFamily::Fcn8 => Net::Fcn8(Fcn8Net::new(widths, config.num_classes, &mut seeds)),
            ArchFamily::Deeplabv3 => Net::V3(DeeplabV3Net::new(
                widths,
                config.num_classes,
                &config.aspp_rates,
                &mut seeds,
            )),
            ArchFamily::Deeplabv3plus => Net::V3Plus(DeeplabV3PlusNet::new(
                widths,
                config.num_classes,
                &config.aspp_rates,
                &mut seeds,
            )),
        };
        Ok(Model { config: config.clone(), net })
    }

    fn check_input(&self, x: &Tensor4<S>) -> Result<(), ArchError> {
        let (n, c, h, w) = x.dims();
        let res = self.config.input_resolution;
        if n == 0 || c != 1 || h != res || w != res {
            return Err(ArchError::ShapeMismatch(format!(
                "input ({n},{c},{h},{w}) does not match (N,1,{res},{res})"
            )));
        }
        Ok(())
    }

    /// Full-resolution class logits. Train mode updates batch-norm running
    /// statistics; eval mode is read-only and deterministic.
    pub fn forward(&mut self, x: &Tensor4<S>, mode: BnMode) -> Result<Tensor4<S>, ArchError> {
        self.check_input(x)?;
        let y = match &mut self.net {
            Net::Fcn8(net) => net.forward(x, mode)?,
            Net::V3(net) => net.forward(x, mode)?,
            Net::V3Plus(net) => net.forward(x, mode)?,
        };
        Ok(y)
    }

    pub(crate) fn forward_train(
        &mut self,
        x: &Tensor4<S>,
    ) -> Result<(Tensor4<S>, Tape<S>), ArchError> {
        self.check_input(x)?;
        let (y, inner) = match &mut self.net {
            Net::Fcn8(net) => {
                let (y, c) = net.forward_cached(x)?;
                (y, TapeInner::Fcn8(c))
            }
            Net::V3(net) => {
                let (y, c) = net.forward_cached(x)?;
                (y, TapeInner::V3(c))
            }
            Net::V3Plus(net) => {
                let (y, c) = net.forward_cached(x)?;
                (y, TapeInner::V3Plus(c))
            }
        };
        Ok((y, Tape { inner }))
    }

    /// Gradients for every trainable parameter, flattened in the same order
    /// as [`Model::param_slices`].
    pub(crate) fn backward(
        &self,
        tape: &Tape<S>,
        dlogits: &Tensor4<S>,
    ) -> Result<Vec<Vec<S>>, ArchError> {
        let grads = match (&self.net, &tape.inner) {
            (Net::Fcn8(net), TapeInner::Fcn8(c)) => net.backward(c, dlogits)?,
            (Net::V3(net), TapeInner::V3(c)) => net.backward(c, dlogits)?,
            (Net::V3Plus(net), TapeInner::V3Plus(c)) => net.backward(c, dlogits)?,
            _ => {
                return Err(ArchError::ShapeMismatch(
                    "tape was recorded by a different model family".into(),
                ))
            }
        };
        Ok(grads)
    }

    pub(crate) fn param_slices(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        match &mut self.net {
            Net::Fcn8(net) => net.collect_params(&mut out),
            Net::V3(net) => net.collect_params(&mut out),
            Net::V3Plus(net) => net.collect_params(&mut out),
        }
        out
    }

    /// Trainable parameter count (conv weights and biases, norm scales and
    /// shifts; running statistics excluded).
    pub fn param_count(&self) -> usize {
        match &self.net {
            Net::Fcn8(net) => net.param_count(),
            Net::V3(net) => net.param_count(),
            Net::V3Plus(net) => net.param_count(),
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} base_width={} input_resolution={} params={}",
            self.config.family,
            self.config.base_width,
            self.config.input_resolution,
            self.param_count()
        )
    }

    pub fn to_records(&self) -> Vec<WeightRecord> {
        let config =
            serde_json::to_string(&self.config).expect("arch config serializes infallibly");
        let mut records = vec![WeightRecord::config(&config)];
        match &self.net {
            Net::Fcn8(net) => net.records(&mut records),
            Net::V3(net) => net.records(&mut records),
            Net::V3Plus(net) => net.records(&mut records),
        }
        records
    }

    pub fn from_records(records: &[WeightRecord]) -> Result<Self, ArchError> {
        let config_text = crate::nn::find_config(records)
            .ok_or_else(|| NnError::WeightFormat("weight file has no config record".into()))??;
        let config: ArchConfig = serde_json::from_str(&config_text).map_err(|e| {
            ArchError::from(NnError::WeightFormat(format!("bad config record: {e}")))
        })?;
        let mut model = Model::build(&config, 0)?;
        let map: HashMap<&str, &WeightRecord> = records
            .iter()
            .filter(|r| r.name != crate::nn::CONFIG_TENSOR_NAME)
            .map(|r| (r.name.as_str(), r))
            .collect();
        let mut used = 0;
        match &mut model.net {
            Net::Fcn8(net) => net.load(&map, &mut used)?,
            Net::V3(net) => net.load(&map, &mut used)?,
            Net::V3Plus(net) => net.load(&map, &mut used)?,
        }
        if used != map.len() {
            return Err(ArchError::from(NnError::WeightFormat(format!(
                "weight file has {} tensors the model does not use",
                map.len() - used
            ))));
        }
        Ok(model)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ArchError> {
        Ok(save_weights(path, &self.to_records())?)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ArchError> {
        Model::from_records(&load_weights(path)?)
    }

    /// Segments one preprocessed, normalized grayscale image.
    pub fn predict_mask(&mut self, image: &ImageF32) -> Result<Prediction, ArchError> {
        if image.channels() != 1 {
            return Err(ArchError::ShapeMismatch(format!(
                "predict expects 1 channel, got {}",
                image.channels()
            )));
        }
        let (h, w) = (image.height(), image.width());
        let data = image.data().iter().map(|&v| S::from_f64(v as f64)).collect();
        let x = Tensor4::new(1, 1, h, w, data)?;
        let logits = self.forward(&x, BnMode::Eval)?;
        let probs = softmax_per_pixel(&logits);
        let entropy = prediction_entropy(&logits);
        let c = logits.dims().1;
        let mut mask = vec![0u8; h * w];
        let mut max_prob = vec![0f32; h * w];
        for hi in 0..h {
            for wi in 0..w {
                let mut best = 0usize;
                let mut best_p = probs.at(0, 0, hi, wi);
                for ci in 1..c {
                    let p = probs.at(0, ci, hi, wi);
                    if p > best_p {
                        best_p = p;
                        best = ci;
                    }
                }
                mask[hi * w + wi] = best as u8;
                max_prob[hi * w + wi] = best_p.as_f64() as f32;
            }
        }
        let mean_entropy =
            entropy.data().iter().map(|&e| e.as_f64()).sum::<f64>() / (h * w) as f64;
        Ok(Prediction {
            mask: MaskU8::new(h, w, mask).expect("mask dims mirror a valid image"),
            max_prob,
            mean_entropy,
        })
    }
}

/// Per-pixel argmax mask plus the confidence signals active learning uses.
pub struct Prediction {
    pub mask: MaskU8,
    /// Row-major winning-class softmax probability per pixel.
    pub max_prob: Vec<f32>,
    /// Mean per-pixel softmax entropy in nats.
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub seed: u64,
    /// Report 0.0 for wall seconds so emitted histories are byte-stable.
    pub deterministic_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 20,
            lr: 1e-4,
            loss: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            seed: 0,
            deterministic_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.epochs == 0 || self.epochs > 200 {
            return Err(ArchError::InvalidConfig(format!(
                "epochs {} outside [1, 200]",
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(ArchError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(LR_MIN..=LR_MAX).contains(&self.lr) {
            return Err(ArchError::InvalidConfig(format!(
                "lr {} outside [{LR_MIN}, {LR_MAX}]",
                self.lr
            )));
        }
        if self.focal_gamma < 0.0 {
            return Err(ArchError::InvalidConfig("focal_gamma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the snapshot the model was restored to.
    pub best_epoch: usize,
    pub best_val_miou: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_miou,seconds\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                i + 1,
                e.train_loss,
                e.val_miou,
                e.seconds
            ));
        }
        out
    }
}

struct PreparedSample {
    pixels: Vec<f32>,
    targets: Vec<u8>,
    mask: MaskU8,
}

fn prepare(samples: &[Sample], resolution: usize) -> Result<Vec<PreparedSample>, ArchError> {
    if samples.is_empty() {
        return Err(ArchError::EmptyDataset);
    }
    samples
        .iter()
        .map(|s| {
            let image: ImageF32 = match &s.image {
                ImageData::U8(img) => normalize(img),
                ImageData::F32(img) => img.clone(),
            };
            if image.channels() != 1
                || image.height() != resolution
                || image.width() != resolution
            {
                return Err(ArchError::ShapeMismatch(format!(
                    "sample {} is {}x{}x{}, model expects 1x{resolution}x{resolution}",
                    s.id,
                    image.height(),
                    image.width(),
                    image.channels()
                )));
            }
            let mask = s.mask.clone().ok_or_else(|| ArchError::MissingMask(s.id.clone()))?;
            if mask.height() != resolution || mask.width() != resolution {
                return Err(ArchError::ShapeMismatch(format!(
                    "sample {} mask dims do not match its image",
                    s.id
                )));
            }
            Ok(PreparedSample {
                pixels: image.data().to_vec(),
                targets: mask.data().to_vec(),
                mask,
            })
        })
        .collect()
}

fn batch_tensor(samples: &[&PreparedSample], resolution: usize) -> (Tensor4<f32>, Vec<u8>) {
    let plane = resolution * resolution;
    let mut data = Vec::with_capacity(samples.len() * plane);
    let mut targets = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        data.extend_from_slice(&s.pixels);
        targets.extend_from_slice(&s.targets);
    }
    let x = Tensor4::new(samples.len(), 1, resolution, resolution, data)
        .expect("prepared samples have validated dims");
    (x, targets)
}

fn argmax_masks(logits: &Tensor4<f32>) -> Vec<MaskU8> {
    let (n, c, h, w) = logits.dims();
    (0..n)
        .map(|ni| {
            let mut data = vec![0u8; h * w];
            for hi in 0..h {
                for wi in 0..w {
                    let mut best = 0usize;
                    let mut best_v = logits.at(ni, 0, hi, wi);
                    for ci in 1..c {
                        let v = logits.at(ni, ci, hi, wi);
                        if v > best_v {
                            best_v = v;
                            best = ci;
                        }
                    }
                    data[hi * w + wi] = best as u8;
                }
            }
            MaskU8::new(h, w, data).expect("logits dims are valid mask dims")
        })
        .collect()
}

/// Mean IoU of the model over a prepared set, in eval mode.
fn eval_miou(
    model: &mut Model<f32>,
    set: &[PreparedSample],
    batch_size: usize,
    resolution: usize,
) -> Result<f64, ArchError> {
    let mut cm = ConfusionMatrix::new();
    for chunk in set.chunks(batch_size) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let (x, _) = batch_tensor(&refs, resolution);
        let logits = model.forward(&x, BnMode::Eval)?;
        for (pred, sample) in argmax_masks(&logits).iter().zip(chunk) {
            cm.accumulate(&sample.mask, pred)?;
        }
    }
    Ok(cm.miou().unwrap_or(0.0))
}

/// Seeded-shuffle minibatch training with Adam; retains the weights of the
/// best validation-mIoU epoch.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainHistory, ArchError> {
    config.validate()?;
    let resolution = model.config.input_resolution;
    let train_data = prepare(train_set, resolution)?;
    let val_data = prepare(val_set, resolution)?;
    let n = train_data.len();
    let num_classes = model.config.num_classes;

    let mut adam = AdamState::<f32>::unbounded(config.lr);
    let focal_params = FocalLossParams::new(config.focal_gamma as f32, vec![1.0; num_classes])?;

    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: 0, best_val_miou: -1.0 };
    let mut best_weights: Option<Vec<WeightRecord>> = None;
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, &[0x7E, epoch as u64]));
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for batch in indices.chunks(config.batch_size) {
            let refs: Vec<&PreparedSample> = batch.iter().map(|&i| &train_data[i]).collect();
            let (x, targets) = batch_tensor(&refs, resolution);
            let (logits, tape) = model.forward_train(&x)?;
            let (loss, dlogits) = match config.loss {
                LossKind::CrossEntropy => cross_entropy_loss(&logits, &targets)?,
                LossKind::Focal => focal_loss(&logits, &targets, &focal_params)?,
            };
            let grads = model.backward(&tape, &dlogits)?;
            drop(tape);
            let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut params = model.param_slices();
            adam.step(&mut params, &grad_refs)?;
            loss_sum += loss as f64 * batch.len() as f64;
        }
        let train_loss = loss_sum / n as f64;
        let val_miou = eval_miou(model, &val_data, config.batch_size, resolution)?;
        if val_miou > history.best_val_miou {
            history.best_val_miou = val_miou;
            history.best_epoch = epoch;
            best_weights = Some(model.to_records());
        }
        let seconds = if config.deterministic_time {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        history.epochs.push(EpochStats { train_loss, val_miou, seconds });
    }

    let records = best_weights.expect("at least one epoch ran");
    *model = Model::from_records(&records)?;
    Ok(history)
}

#[cfg(test)]
mod tests;
