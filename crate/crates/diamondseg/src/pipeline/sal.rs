//! Selective augmentation: finds labeled images the current model still
//! segments poorly, multiplies them with augmented copies, and flags images
//! that stay poor round after round for a second look by annotators.

use std::collections::HashMap;

use crate::arch::Model;
use crate::augment::{augment_dataset, AugmentPlan};
use crate::imaging::Sample;
use crate::metrics::ConfusionMatrix;
use crate::seed::derive_seed;

use super::{predict_sample, PipelineError, RelabelEntry, RelabelReport};

const SAL_SALT: u64 = 0x5a1;
/// An image must score low this many consecutive rounds to be reported for
/// relabeling; one bad round can be the model's fault, a persistent one
/// points at the label.
const RELABEL_STREAK: u32 = 2;

/// mIoU of the model's prediction against the sample's own working label.
pub fn per_image_miou(model: &mut Model<f32>, sample: &Sample) -> Result<f64, PipelineError> {
    let label = sample
        .mask
        .as_ref()
        .ok_or_else(|| PipelineError::MissingMask(sample.id.clone()))?;
    let prediction = predict_sample(model, sample)?;
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(label, &prediction.mask)?;
    Ok(cm.miou().unwrap_or(0.0))
}

/// What one refinement round produced.
#[derive(Debug)]
pub struct SalOutcome {
    /// Augmented copies of the low-scoring images, ready to append to the
    /// labeled set. Empty means the round converged: nothing scored low.
    pub copies: Vec<Sample>,
    pub low_ids: Vec<String>,
    /// Images low for `RELABEL_STREAK`+ consecutive rounds, if any.
    pub report: Option<RelabelReport>,
}

/// Carries low-score streaks across the rounds of one phase.
#[derive(Debug)]
pub struct SalTracker {
    threshold: f64,
    streaks: HashMap<String, u32>,
}

impl SalTracker {
    pub fn new(threshold: f64) -> Self {
        SalTracker { threshold, streaks: HashMap::new() }
    }

    /// Updates streaks with this round's per-image scores. Returns the ids
    /// that scored low (below the threshold, sorted) and, when any streak
    /// reaches `RELABEL_STREAK`, the relabel report for this round.
    fn observe(
        &mut self,
        scores: &[(&str, f64)],
        iteration: u32,
    ) -> (Vec<String>, Option<RelabelReport>) {
        let mut lows: Vec<(String, f64)> = Vec::new();
        for &(id, miou) in scores {
            if miou < self.threshold {
                *self.streaks.entry(id.to_string()).or_insert(0) += 1;
                lows.push((id.to_string(), miou));
            } else {
                self.streaks.remove(id);
            }
        }
        lows.sort_by(|a, b| a.0.cmp(&b.0));

        let entries: Vec<RelabelEntry> = lows
            .iter()
            .filter_map(|(id, miou)| {
                let streak = self.streaks[id];
                (streak >= RELABEL_STREAK).then(|| RelabelEntry {
                    id: id.clone(),
                    miou: *miou,
                    low_streak: streak,
                })
            })
            .collect();
        let report = (!entries.is_empty())
            .then_some(RelabelReport { entries, generated_at_iteration: iteration });
        (lows.into_iter().map(|(id, _)| id).collect(), report)
    }

    /// Scores every labeled image, updates streaks, and augments the low
    /// scorers with `copies_per_image` fresh copies each. Copy ids get a
    /// round suffix so repeated rounds never collide.
    pub fn round(
        &mut self,
        model: &mut Model<f32>,
        labeled: &[Sample],
        copies_per_image: usize,
        round: u32,
        seed: u64,
        iteration: u32,
    ) -> Result<SalOutcome, PipelineError> {
        let mut scores = Vec::with_capacity(labeled.len());
        for sample in labeled {
            scores.push((sample.id.as_str(), per_image_miou(model, sample)?));
        }
        let (low_ids, report) = self.observe(&scores, iteration);
        if low_ids.is_empty() {
            return Ok(SalOutcome { copies: Vec::new(), low_ids, report });
        }

        let low_samples: Vec<Sample> = labeled
            .iter()
            .filter(|s| low_ids.binary_search(&s.id).is_ok())
            .cloned()
            .collect();
        let plan = AugmentPlan {
            rate: copies_per_image + 1,
            seed: derive_seed(seed, &[SAL_SALT, round as u64]),
            ..AugmentPlan::default()
        };
        let copies: Vec<Sample> = augment_dataset(&low_samples, &plan)?
            .into_iter()
            .filter(|s| s.provenance.is_some())
            .map(|mut s| {
                s.id = format!("{}r{round}", s.id);
                s
            })
            .collect();
        Ok(SalOutcome { copies, low_ids, report })
    }
}
