//! Labeling-loop orchestration: active-learning batch selection, simulated
//! consensus annotation, model-assisted pre-annotation behind an accuracy
//! gate, selective augmentation of weak images, and two-phase training with
//! a deterministic audit trail.
//!
//! The loop alternates acquisition (select a batch, annotate it, retrain)
//! until the phase's validation target is met or the pool is drained, then
//! refinement (augment low-scoring images, retrain) for a bounded number of
//! rounds. Annotation is simulated against synthetic ground truth, so every
//! run is a pure function of its seeds.

mod annotate;
mod phases;
mod sal;
mod select;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchConfig, ArchError, Model, Prediction, TrainConfig};
use crate::augment::AugmentError;
use crate::imaging::{ImageData, ImageF32, Sample};
use crate::metrics::MetricsError;
use crate::preprocess::normalize;
use crate::synthgen::SynthError;

pub use annotate::{annotate_batch, gate_decision, mal_gate, validation_miou, MAL_GATE_MIOU};
pub use phases::{run_baseline_phase, run_final_phase};
pub use sal::{per_image_miou, SalOutcome, SalTracker};
pub use select::select_batch;

// The annotator model is part of this module's config surface.
pub use crate::synthgen::AnnotatorNoiseSpec;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("sample pool is empty")]
    EmptyPool,
    #[error("sample {0} has no ground-truth mask to annotate against")]
    MissingMask(String),
    #[error("model-assisted mode needs pre-annotations for the batch")]
    MissingPreannotations,
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Even strides across each run's timeline, runs weighted by size.
    TemporalStratified,
    /// Highest mean per-pixel prediction entropy first; needs a model.
    EntropyTopk,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionStrategy::TemporalStratified => "temporal_stratified",
            SelectionStrategy::EntropyTopk => "entropy_topk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub strategy: SelectionStrategy,
    pub batch_size: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy { strategy: SelectionStrategy::TemporalStratified, batch_size: 100 }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// Annotators draw every mask from nothing.
    Scratch,
    /// Annotators only correct where a model pre-annotation disagrees
    /// with their consensus.
    Mal,
}

impl fmt::Display for AnnotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationMode::Scratch => "scratch",
            AnnotationMode::Mal => "mal",
        })
    }
}

/// Labeling effort for one annotated batch, in proxy minutes per image.
pub const SCRATCH_MINUTES: f64 = 13.0;
/// Floor of the proxy: a perfect pre-annotation still costs review time.
pub const MAL_MINUTES_FLOOR: f64 = 3.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortRecord {
    pub iteration: u32,
    pub mode: AnnotationMode,
    pub batch: usize,
    /// Share of non-background consensus pixels the annotators had to
    /// correct; 1.0 by definition in scratch mode.
    pub corrected_pixel_fraction: f64,
    /// Per-image labeling-time proxy, linear in the corrected fraction
    /// between the review floor and a from-scratch label.
    pub proxy_minutes: f64,
}

pub fn effort_csv(records: &[EffortRecord]) -> String {
    let mut out = String::from("iteration,mode,batch,corrected_pixel_fraction,proxy_minutes\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.iteration, r.mode, r.batch, r.corrected_pixel_fraction, r.proxy_minutes
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelEntry {
    pub id: String,
    pub miou: f64,
    /// Consecutive refinement rounds this image has scored low.
    pub low_streak: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelReport {
    pub entries: Vec<RelabelEntry>,
    pub generated_at_iteration: u32,
}

pub fn relabel_csv(reports: &[RelabelReport]) -> String {
    let mut out = String::from("iteration,id,miou,low_streak\n");
    for report in reports {
        for e in &report.entries {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                report.generated_at_iteration, e.id, e.miou, e.low_streak
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Final,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Baseline => "baseline",
            Phase::Final => "final",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub policy: SelectionPolicy,
    pub annotators: usize,
    pub noise: AnnotatorNoiseSpec,
    pub baseline_threshold_miou: f64,
    pub final_threshold_miou: f64,
    pub sal_max_rounds: u32,
    pub sal_low_image_threshold_miou: f64,
    /// Augmented copies appended per low-scoring image and round.
    pub sal_copies: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            policy: SelectionPolicy::default(),
            annotators: 3,
            noise: AnnotatorNoiseSpec::default(),
            baseline_threshold_miou: 0.80,
            final_threshold_miou: 0.95,
            sal_max_rounds: 5,
            sal_low_image_threshold_miou: 0.80,
            sal_copies: 4,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.policy.validate()?;
        if self.annotators == 0 {
            return Err(PipelineError::InvalidConfig("annotators must be >= 1".into()));
        }
        for (name, v) in [
            ("baseline_threshold_miou", self.baseline_threshold_miou),
            ("final_threshold_miou", self.final_threshold_miou),
            ("sal_low_image_threshold_miou", self.sal_low_image_threshold_miou),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(PipelineError::InvalidConfig(format!("{name} = {v} outside (0, 1)")));
            }
        }
        if self.sal_copies == 0 {
            return Err(PipelineError::InvalidConfig("sal_copies must be >= 1".into()));
        }
        self.arch.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Where a phase ended up: counters, the data pools as it left them, and
/// the per-batch effort and relabel trails.
#[derive(Debug)]
pub struct LoopState {
    pub phase: Phase,
    pub iterations: u32,
    pub sal_rounds: u32,
    pub best_val_miou: f64,
    /// The phase's validation target was met at some iteration.
    pub target_met: bool,
    /// The unlabeled pool drained before the target was met.
    pub exhausted_pool: bool,
    pub labeled: Vec<Sample>,
    pub pool: Vec<Sample>,
    pub efforts: Vec<EffortRecord>,
    pub relabel_reports: Vec<RelabelReport>,
}

/// Line-oriented, timestamp-free event log; byte-identical across reruns
/// with the same seeds.
#[derive(Debug, Default, Clone)]
pub struct AuditLog {
    lines: Vec<String>,
}

impl AuditLog {
    pub fn new() -> Self {
        AuditLog::default()
    }

    /// Appends one `event key=value ...` line. Values must not contain
    /// whitespace; floats should be pre-formatted with fixed precision.
    pub fn event(&mut self, event: &str, fields: &[(&str, String)]) {
        let mut line = String::from(event);
        for (k, v) in fields {
            debug_assert!(
                !v.chars().any(char::is_whitespace),
                "audit value for {k} contains whitespace: {v:?}"
            );
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(v);
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_text(&self) -> String {
        let mut out = self.lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Model input for one sample: 1-channel float image at the sample's own
/// resolution, normalizing 8-bit sources on the fly.
pub(crate) fn sample_image(sample: &Sample) -> Result<ImageF32, PipelineError> {
    let image = match &sample.image {
        ImageData::U8(img) => normalize(img),
        ImageData::F32(img) => img.clone(),
    };
    if image.channels() != 1 {
        return Err(PipelineError::InvalidConfig(format!(
            "sample {} has {} channels, expected 1",
            sample.id,
            image.channels()
        )));
    }
    Ok(image)
}

/// Runs the model on one sample.
pub fn predict_sample(
    model: &mut Model<f32>,
    sample: &Sample,
) -> Result<Prediction, PipelineError> {
    let image = sample_image(sample)?;
    Ok(model.predict_mask(&image)?)
}

const LATEST_FILE: &str = "LATEST";

/// Saves `model` into `dir` as the next `vNNN_<label>.dwgt` and points the
/// `LATEST` file at it. Returns the written path.
pub fn save_versioned(
    dir: &Path,
    model: &Model<f32>,
    label: &str,
) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(dir)?;
    let mut version = 1;
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        if name.to_string_lossy().ends_with(".dwgt") {
            version += 1;
        }
    }
    let filename = format!("v{version:03}_{label}.dwgt");
    let path = dir.join(&filename);
    model.save(&path)?;
    fs::write(dir.join(LATEST_FILE), format!("{filename}\n"))?;
    Ok(path)
}

/// Loads the model the store's `LATEST` pointer names.
pub fn load_latest(dir: &Path) -> Result<Model<f32>, PipelineError> {
    let name = fs::read_to_string(dir.join(LATEST_FILE))?;
    Ok(Model::load(dir.join(name.trim()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_covers_every_field() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = [
            PipelineConfig {
                policy: SelectionPolicy { batch_size: 0, ..SelectionPolicy::default() },
                ..PipelineConfig::default()
            },
            PipelineConfig { annotators: 0, ..PipelineConfig::default() },
            PipelineConfig { baseline_threshold_miou: 0.0, ..PipelineConfig::default() },
            PipelineConfig { final_threshold_miou: 1.0, ..PipelineConfig::default() },
            PipelineConfig { sal_low_image_threshold_miou: -0.1, ..PipelineConfig::default() },
            PipelineConfig { sal_copies: 0, ..PipelineConfig::default() },
        ];
        for config in bad {
            assert!(matches!(config.validate(), Err(PipelineError::InvalidConfig(_))));
        }
    }

    #[test]
    fn audit_log_renders_stable_lines() {
        let mut log = AuditLog::new();
        log.event("phase_start", &[("phase", "baseline".into()), ("pool", "270".into())]);
        log.event("gate", &[("passed", "true".into()), ("val_miou", fmt_f(0.8125))]);
        assert_eq!(log.lines()[0], "phase_start phase=baseline pool=270");
        assert_eq!(log.lines()[1], "gate passed=true val_miou=0.812500");
        assert_eq!(log.to_text(), "phase_start phase=baseline pool=270\ngate passed=true val_miou=0.812500\n");
        assert_eq!(AuditLog::new().to_text(), "");
    }

    #[test]
    fn effort_and_relabel_csv_schemas() {
        let efforts = vec![
            EffortRecord {
                iteration: 1,
                mode: AnnotationMode::Scratch,
                batch: 100,
                corrected_pixel_fraction: 1.0,
                proxy_minutes: SCRATCH_MINUTES,
            },
            EffortRecord {
                iteration: 2,
                mode: AnnotationMode::Mal,
                batch: 50,
                corrected_pixel_fraction: 0.25,
                proxy_minutes: MAL_MINUTES_FLOOR + 0.25 * (SCRATCH_MINUTES - MAL_MINUTES_FLOOR),
            },
        ];
        let csv = effort_csv(&efforts);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,mode,batch,corrected_pixel_fraction,proxy_minutes");
        assert_eq!(lines[1], "1,scratch,100,1.000000,13.000000");
        assert_eq!(lines[2], "2,mal,50,0.250000,5.650000");

        let reports = vec![RelabelReport {
            entries: vec![RelabelEntry { id: "r0_f003".into(), miou: 0.61, low_streak: 2 }],
            generated_at_iteration: 4,
        }];
        let csv = relabel_csv(&reports);
        assert_eq!(csv, "iteration,id,miou,low_streak\n4,r0_f003,0.610000,2\n");
    }

    #[test]
    fn model_store_versions_and_latest_pointer() {
        let dir = tempfile::tempdir().unwrap();
        let config = ArchConfig::default();
        let model_a = Model::<f32>::build(&config, 1).unwrap();
        let model_b = Model::<f32>::build(&config, 2).unwrap();

        let p1 = save_versioned(dir.path(), &model_a, "baseline").unwrap();
        assert_eq!(p1.file_name().unwrap(), "v001_baseline.dwgt");
        let p2 = save_versioned(dir.path(), &model_b, "final").unwrap();
        assert_eq!(p2.file_name().unwrap(), "v002_final.dwgt");

        let latest = load_latest(dir.path()).unwrap();
        let want = model_b.to_records();
        let got = latest.to_records();
        assert_eq!(want.len(), got.len());
        for (w, g) in want.iter().zip(&got) {
            assert_eq!(w.data, g.data, "{} differs from stored latest", w.name);
        }
    }
}
