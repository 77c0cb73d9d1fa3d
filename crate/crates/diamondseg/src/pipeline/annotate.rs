//! Simulated consensus annotation and the model-assist accuracy gate.

use crate::arch::Model;
use crate::imaging::{MaskU8, Sample};
use crate::metrics::ConfusionMatrix;
use crate::seed::{derive_seed, hash_str};
use crate::synthgen::{consensus, simulate_annotator, AnnotatorNoiseSpec};

use super::{
    AnnotationMode, EffortRecord, PipelineError, MAL_MINUTES_FLOOR, SCRATCH_MINUTES,
};

/// Validation mIoU a model must reach before its predictions may seed
/// model-assisted labeling.
pub const MAL_GATE_MIOU: f64 = 0.80;

const ANNOTATOR_SALT: u64 = 0xA1107;

/// Labels a batch by majority vote of `annotators` simulated annotators and
/// returns it with `mask` replaced by the consensus, plus the effort spent.
///
/// Each sample must still carry its ground-truth mask; that is what the
/// annotator simulation perturbs. In `Mal` mode `preannotations` must hold
/// one prediction per batch sample (same order), and effort shrinks with
/// the fraction of non-background consensus pixels the prediction already
/// had right; in `Scratch` mode every pixel is annotator work by
/// definition. The batch's corrected fraction pools pixels across images.
pub fn annotate_batch(
    mut batch: Vec<Sample>,
    annotators: usize,
    noise: &AnnotatorNoiseSpec,
    mode: AnnotationMode,
    preannotations: Option<&[MaskU8]>,
    seed: u64,
    iteration: u32,
) -> Result<(Vec<Sample>, EffortRecord), PipelineError> {
    if annotators == 0 {
        return Err(PipelineError::InvalidConfig("annotators must be >= 1".into()));
    }
    if batch.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    let preannotations = match mode {
        AnnotationMode::Scratch => None,
        AnnotationMode::Mal => {
            let pre = preannotations.ok_or(PipelineError::MissingPreannotations)?;
            if pre.len() != batch.len() {
                return Err(PipelineError::MissingPreannotations);
            }
            Some(pre)
        }
    };

    let mut disagreeing = 0u64;
    let mut foreground = 0u64;
    for (i, sample) in batch.iter_mut().enumerate() {
        let gt = sample
            .mask
            .as_ref()
            .ok_or_else(|| PipelineError::MissingMask(sample.id.clone()))?;
        let drawn: Vec<MaskU8> = (0..annotators)
            .map(|a| {
                let annotator_seed =
                    derive_seed(seed, &[ANNOTATOR_SALT, hash_str(&sample.id), a as u64]);
                simulate_annotator(gt, noise, annotator_seed)
            })
            .collect();
        let agreed = consensus(&drawn)?;

        if let Some(pre) = preannotations {
            let pre = &pre[i];
            if pre.height() != agreed.height() || pre.width() != agreed.width() {
                return Err(PipelineError::InvalidConfig(format!(
                    "pre-annotation for {} is {}x{}, consensus is {}x{}",
                    sample.id,
                    pre.height(),
                    pre.width(),
                    agreed.height(),
                    agreed.width()
                )));
            }
            for (&p, &c) in pre.data().iter().zip(agreed.data()) {
                if c != 0 {
                    foreground += 1;
                    if p != c {
                        disagreeing += 1;
                    }
                }
            }
        }
        sample.mask = Some(agreed);
    }

    let (corrected_pixel_fraction, proxy_minutes) = match mode {
        AnnotationMode::Scratch => (1.0, SCRATCH_MINUTES),
        AnnotationMode::Mal => {
            let fraction = if foreground == 0 {
                0.0
            } else {
                disagreeing as f64 / foreground as f64
            };
            (
                fraction,
                MAL_MINUTES_FLOOR + fraction * (SCRATCH_MINUTES - MAL_MINUTES_FLOOR),
            )
        }
    };
    let effort = EffortRecord {
        iteration,
        mode,
        batch: batch.len(),
        corrected_pixel_fraction,
        proxy_minutes,
    };
    Ok((batch, effort))
}

/// Aggregate mIoU of the model over a held-out set with trusted masks.
pub fn validation_miou(
    model: &mut Model<f32>,
    val: &[Sample],
) -> Result<f64, PipelineError> {
    if val.is_empty() {
        return Err(PipelineError::InvalidConfig("validation set is empty".into()));
    }
    let mut cm = ConfusionMatrix::new();
    for sample in val {
        let gt = sample
            .mask
            .as_ref()
            .ok_or_else(|| PipelineError::MissingMask(sample.id.clone()))?;
        let prediction = super::predict_sample(model, sample)?;
        cm.accumulate(gt, &prediction.mask)?;
    }
    Ok(cm.miou().unwrap_or(0.0))
}

/// `true` when `miou` meets `threshold`; meeting it exactly counts.
pub fn gate_decision(miou: f64, threshold: f64) -> bool {
    miou >= threshold
}

/// Whether a model is accurate enough to pre-annotate for human correction.
pub fn mal_gate(validation_miou: f64) -> bool {
    gate_decision(validation_miou, MAL_GATE_MIOU)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchConfig, Model};
    use crate::imaging::{ImageData, ImageU8, SplitTag};

    fn quiet() -> AnnotatorNoiseSpec {
        AnnotatorNoiseSpec { boundary_jitter_px: 0, region_flip_prob: 0.0, pixel_noise_prob: 0.0 }
    }

    fn sample_with_mask(id: &str, mask: Vec<u8>) -> Sample {
        let side = (mask.len() as f64).sqrt() as usize;
        assert_eq!(side * side, mask.len());
        Sample {
            id: id.into(),
            run_id: "r0".into(),
            timestamp_min: 0,
            image: ImageData::U8(ImageU8::new(side, side, 1, vec![100; mask.len()]).unwrap()),
            mask: Some(MaskU8::new(side, side, mask).unwrap()),
            split: SplitTag::Train,
            provenance: None,
        }
    }

    #[test]
    fn scratch_with_quiet_annotators_reproduces_ground_truth() {
        let gt: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
        let batch = vec![sample_with_mask("a", gt.clone())];
        let (labeled, effort) =
            annotate_batch(batch, 3, &quiet(), AnnotationMode::Scratch, None, 7, 1).unwrap();
        assert_eq!(labeled[0].mask.as_ref().unwrap().data(), &gt[..]);
        assert_eq!(effort.corrected_pixel_fraction, 1.0);
        assert_eq!(effort.proxy_minutes, SCRATCH_MINUTES);
        assert_eq!(effort.mode, AnnotationMode::Scratch);
        assert_eq!(effort.batch, 1);
        assert_eq!(effort.iteration, 1);
    }

    #[test]
    fn annotation_is_deterministic_in_the_seed() {
        let gt = vec![1; 256];
        let noisy = AnnotatorNoiseSpec::default();
        let run = |seed| {
            let batch = vec![sample_with_mask("a", gt.clone())];
            let (labeled, _) =
                annotate_batch(batch, 3, &noisy, AnnotationMode::Scratch, None, seed, 1).unwrap();
            labeled[0].mask.as_ref().unwrap().data().to_vec()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn mal_effort_scales_with_disagreement() {
        // Ground truth has 4 foreground pixels; quiet annotators make the
        // consensus equal to it.
        let mut gt = vec![0u8; 64];
        gt[1] = 1;
        gt[2] = 1;
        gt[8] = 2;
        gt[9] = 2;
        let perfect = MaskU8::new(8, 8, gt.clone()).unwrap();
        let mut half = gt.clone();
        half[1] = 0; // was 1
        half[8] = 3; // was 2
        let half = MaskU8::new(8, 8, half).unwrap();

        let batch = vec![sample_with_mask("a", gt.clone())];
        let (_, effort) =
            annotate_batch(batch, 3, &quiet(), AnnotationMode::Mal, Some(&[perfect]), 0, 2)
                .unwrap();
        assert_eq!(effort.corrected_pixel_fraction, 0.0);
        assert_eq!(effort.proxy_minutes, MAL_MINUTES_FLOOR);

        let batch = vec![sample_with_mask("a", gt)];
        let (_, effort) =
            annotate_batch(batch, 3, &quiet(), AnnotationMode::Mal, Some(&[half]), 0, 2).unwrap();
        assert_eq!(effort.corrected_pixel_fraction, 0.5);
        assert!((effort.proxy_minutes - 8.1).abs() < 1e-12);
    }

    #[test]
    fn background_only_consensus_costs_the_review_floor() {
        // Disagreement on background pixels is not counted: the fraction's
        // denominator is foreground consensus, and there is none here.
        let pre = MaskU8::new(8, 8, vec![3; 64]).unwrap();
        let batch = vec![sample_with_mask("a", vec![0; 64])];
        let (_, effort) =
            annotate_batch(batch, 3, &quiet(), AnnotationMode::Mal, Some(&[pre]), 0, 1).unwrap();
        assert_eq!(effort.corrected_pixel_fraction, 0.0);
        assert_eq!(effort.proxy_minutes, MAL_MINUTES_FLOOR);
    }

    #[test]
    fn mal_demands_matching_preannotations() {
        let batch = vec![sample_with_mask("a", vec![0; 64])];
        assert!(matches!(
            annotate_batch(batch.clone(), 3, &quiet(), AnnotationMode::Mal, None, 0, 1),
            Err(PipelineError::MissingPreannotations)
        ));
        let too_few: Vec<MaskU8> = Vec::new();
        assert!(matches!(
            annotate_batch(batch.clone(), 3, &quiet(), AnnotationMode::Mal, Some(&too_few), 0, 1),
            Err(PipelineError::MissingPreannotations)
        ));
        let wrong_shape = [MaskU8::new(2, 2, vec![0; 4]).unwrap()];
        assert!(matches!(
            annotate_batch(batch, 3, &quiet(), AnnotationMode::Mal, Some(&wrong_shape), 0, 1),
            Err(PipelineError::InvalidConfig(_))
        ));
    }

    #[test]
    fn unlabeled_ground_truth_is_rejected() {
        let mut sample = sample_with_mask("bare", vec![0; 64]);
        sample.mask = None;
        let err = annotate_batch(vec![sample], 1, &quiet(), AnnotationMode::Scratch, None, 0, 1);
        assert!(matches!(err, Err(PipelineError::MissingMask(id)) if id == "bare"));
        assert!(matches!(
            annotate_batch(Vec::new(), 1, &quiet(), AnnotationMode::Scratch, None, 0, 1),
            Err(PipelineError::EmptyPool)
        ));
    }

    #[test]
    fn gate_accepts_exactly_at_threshold() {
        assert!(gate_decision(0.80, 0.80));
        assert!(!gate_decision(0.7999999, 0.80));
        assert!(mal_gate(MAL_GATE_MIOU));
        assert!(!mal_gate(MAL_GATE_MIOU - 1e-9));
    }

    #[test]
    fn untrained_model_is_perfect_on_all_background_validation() {
        // Zero-initialized heads predict uniform scores; the argmax tie
        // rule picks class 0 everywhere, which matches an all-background
        // mask exactly.
        let config = ArchConfig { input_resolution: 32, base_width: 4, ..ArchConfig::default() };
        let mut model = Model::<f32>::build(&config, 0).unwrap();
        let val = vec![sample_with_mask("v0", vec![0; 32 * 32])];
        let miou = validation_miou(&mut model, &val).unwrap();
        assert_eq!(miou, 1.0);
        assert!(matches!(
            validation_miou(&mut model, &[]),
            Err(PipelineError::InvalidConfig(_))
        ));
    }
}
