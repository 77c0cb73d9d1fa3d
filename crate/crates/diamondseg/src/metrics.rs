//! Segmentation accuracy metrics over the 4-class confusion matrix.
//!
//! All quantities derive from integer pixel counts, so equal inputs produce
//! bit-equal floats. The headline mIoU comes from the aggregate matrix over a
//! dataset; the per-image average is a separate, clearly named quantity.
//!
//! Absent-class policy: a class with no ground-truth and no predicted pixels
//! has undefined IoU and is excluded from means rather than scored 1.0.

use crate::imaging::{MaskU8, NUM_CLASSES};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty confusion matrix")]
    EmptyMatrix,
}

/// counts[gt][pred] accumulated over pixels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds one ground-truth/prediction mask pair.
    pub fn accumulate(&mut self, gt: &MaskU8, pred: &MaskU8) -> Result<(), MetricsError> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(MetricsError::DimensionMismatch(format!(
                "gt {}x{} vs pred {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        for (&g, &p) in gt.data().iter().zip(pred.data().iter()) {
            self.counts[usize::from(g)][usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    fn col_sum(&self, class: usize) -> u64 {
        (0..NUM_CLASSES).map(|g| self.counts[g][class]).sum()
    }

    /// Fraction of pixels classified correctly.
    pub fn pixel_accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let diag: u64 = (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Mean over classes present in ground truth of per-class recall.
    pub fn mean_pixel_accuracy(&self) -> Result<f64, MetricsError> {
        let mut acc = 0.0;
        let mut n = 0u32;
        for c in 0..NUM_CLASSES {
            let row = self.row_sum(c);
            if row > 0 {
                acc += self.counts[c][c] as f64 / row as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        Ok(acc / f64::from(n))
    }

    /// Intersection-over-union for one class; `None` when the class appears
    /// in neither ground truth nor prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        assert!(class < NUM_CLASSES);
        let diag = self.counts[class][class];
        let denom = self.row_sum(class) + self.col_sum(class) - diag;
        if denom == 0 {
            None
        } else {
            Some(diag as f64 / denom as f64)
        }
    }

    /// Mean IoU over classes with defined IoU, optionally restricted to a
    /// subset of class ids.
    fn miou_over(&self, classes: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean IoU over all classes with defined IoU.
    pub fn miou(&self) -> Option<f64> {
        self.miou_over(&[0, 1, 2, 3])
    }

    /// Mean IoU over the foreground (field-of-interest) classes 1..=3.
    pub fn miou_foi(&self) -> Option<f64> {
        self.miou_over(&[1, 2, 3])
    }

    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let mut iou = [None; NUM_CLASSES];
        let mut evaluated = Vec::new();
        for (c, slot) in iou.iter_mut().enumerate() {
            *slot = self.iou(c);
            if slot.is_some() {
                evaluated.push(c);
            }
        }
        Ok(MetricsReport {
            pa: self.pixel_accuracy()?,
            mpa: self.mean_pixel_accuracy()?,
            iou,
            miou: self.miou(),
            miou_foi: self.miou_foi(),
            evaluated_classes: evaluated,
        })
    }
}

/// Metrics of one aggregate confusion matrix.
///
/// `miou` averages every class with defined IoU (background included);
/// `miou_foi` averages only the three foreground classes. Both are reported
/// because published mean figures do not always state whether background
/// participates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pa: f64,
    pub mpa: f64,
    pub iou: [Option<f64>; NUM_CLASSES],
    pub miou: Option<f64>,
    pub miou_foi: Option<f64>,
    pub evaluated_classes: Vec<usize>,
}

/// Dataset-level evaluation: aggregate-matrix metrics plus the mean of
/// per-image mIoU values (images with no defined IoU are skipped).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub aggregate: MetricsReport,
    pub per_image_mean_miou: Option<f64>,
    pub images: usize,
}

/// Evaluates a dataset of (ground truth, prediction) pairs.
pub fn evaluate_dataset(pairs: &[(&MaskU8, &MaskU8)]) -> Result<DatasetReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyMatrix);
    }
    let mut aggregate = ConfusionMatrix::new();
    let mut image_mious = Vec::new();
    for (gt, pred) in pairs {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(gt, pred)?;
        if let Some(m) = cm.miou() {
            image_mious.push(m);
        }
        aggregate.merge(&cm);
    }
    let per_image_mean_miou = if image_mious.is_empty() {
        None
    } else {
        Some(image_mious.iter().sum::<f64>() / image_mious.len() as f64)
    };
    Ok(DatasetReport {
        aggregate: aggregate.report()?,
        per_image_mean_miou,
        images: pairs.len(),
    })
}

/// Header of the comparison-table CSV schema.
pub const TABLE_CSV_HEADER: &str = "model,dataset_size,resolution,pocket_holder_iou,diamond_top_iou,diamond_side_iou,background_iou,miou,pa,mpa";

fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", x * 100.0),
        None => String::new(),
    }
}

/// Formats one comparison-table row. Percentages with two decimals; absent
/// classes yield empty cells.
pub fn table_csv_row(
    model: &str,
    dataset_size: usize,
    resolution: usize,
    report: &MetricsReport,
) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        model,
        dataset_size,
        resolution,
        pct(report.iou[1]),
        pct(report.iou[2]),
        pct(report.iou[3]),
        pct(report.iou[0]),
        pct(report.miou),
        pct(Some(report.pa)),
        pct(Some(report.mpa)),
    )
}

/// Serializes a dataset report as pretty JSON.
pub fn report_json(report: &DatasetReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, data: &[u8]) -> MaskU8 {
        MaskU8::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_counts_and_accuracies() {
        // gt [[0,0],[1,1]], pred [[0,1],[1,1]]: one 0->1 confusion.
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let pred = mask(2, 2, &[0, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.counts()[0][0], 1);
        assert_eq!(cm.counts()[0][1], 1);
        assert_eq!(cm.counts()[1][1], 2);
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.75);
        // class 0 recall 1/2, class 1 recall 1 -> mean 3/4
        assert_eq!(cm.mean_pixel_accuracy().unwrap(), 0.75);
    }

    #[test]
    fn iou_intersection_two_union_five() {
        // class 1: gt occupies 3 pixels, pred 4, overlapping on 2.
        let gt = mask(2, 3, &[1, 1, 1, 0, 0, 0]);
        let pred = mask(2, 3, &[0, 1, 1, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.iou(1), Some(0.4));
    }

    #[test]
    fn absent_class_is_excluded_not_scored_one() {
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let pred = mask(2, 2, &[0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.iou(2), None);
        assert_eq!(cm.iou(3), None);
        assert_eq!(cm.miou(), Some(1.0));
        let report = cm.report().unwrap();
        assert_eq!(report.evaluated_classes, vec![0, 1]);
    }

    #[test]
    fn false_positives_on_absent_class_score_zero() {
        let gt = mask(2, 2, &[0, 0, 0, 0]);
        let pred = mask(2, 2, &[0, 0, 0, 2]);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.iou(2), Some(0.0));
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let gt = mask(2, 4, &[0, 1, 2, 3, 3, 2, 1, 0]);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&gt, &gt).unwrap();
        let r = cm.report().unwrap();
        assert_eq!(r.pa, 1.0);
        assert_eq!(r.mpa, 1.0);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.miou_foi, Some(1.0));
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let cm = ConfusionMatrix::new();
        assert_eq!(cm.pixel_accuracy(), Err(MetricsError::EmptyMatrix));
        assert_eq!(cm.report().unwrap_err(), MetricsError::EmptyMatrix);
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let pred = mask(1, 4, &[0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new();
        assert!(matches!(
            cm.accumulate(&gt, &pred),
            Err(MetricsError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn aggregate_differs_from_per_image_mean() {
        // One image nails a large region, the other misses a small one; the
        // aggregate weights pixels, the per-image mean weights images.
        let gt_a = mask(2, 2, &[1, 1, 1, 1]);
        let pred_a = mask(2, 2, &[1, 1, 1, 1]);
        let gt_b = mask(2, 2, &[1, 0, 0, 0]);
        let pred_b = mask(2, 2, &[0, 0, 0, 0]);
        let report = evaluate_dataset(&[(&gt_a, &pred_a), (&gt_b, &pred_b)]).unwrap();
        let agg = report.aggregate.miou.unwrap();
        let per_image = report.per_image_mean_miou.unwrap();
        assert!(agg > per_image);
    }

    #[test]
    fn table_row_formats_percentages() {
        let report = MetricsReport {
            pa: 0.9876,
            mpa: 0.9765,
            iou: [Some(0.9), Some(0.9631), Some(0.986), Some(0.9164)],
            miou: Some(0.9543),
            miou_foi: Some(0.9552),
            evaluated_classes: vec![0, 1, 2, 3],
        };
        let row = table_csv_row("deeplabv3plus", 10000, 512, &report);
        assert_eq!(
            row,
            "deeplabv3plus,10000,512,96.31,98.60,91.64,90.00,95.43,98.76,97.65"
        );
        assert_eq!(TABLE_CSV_HEADER.split(',').count(), row.split(',').count());
    }

    #[test]
    fn report_json_is_parseable() {
        let gt = mask(2, 2, &[0, 1, 2, 3]);
        let report = evaluate_dataset(&[(&gt, &gt)]).unwrap();
        let json = report_json(&report);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["images"], 1);
        assert_eq!(value["aggregate"]["pa"], 1.0);
    }
}
