//! The two-phase labeling loop.
//!
//! Phase one bootstraps a model from scratch-annotated batches; phase two
//! continues with model-assisted annotation once the model clears the
//! assist gate. Both phases share one driver: acquire and train until the
//! phase target holds or the pool drains, then refine with selective
//! augmentation under a round cap. A phase never touches the validation
//! set except to score on it.

use crate::arch::{train, Model, TrainConfig};
use crate::imaging::{MaskU8, Sample};
use crate::seed::derive_seed;

use super::{
    annotate_batch, gate_decision, mal_gate, predict_sample, validation_miou, AnnotationMode,
    AuditLog, EffortRecord, LoopState, Phase, PipelineConfig, PipelineError, RelabelReport,
    SalTracker, MAL_GATE_MIOU,
};

const MODEL_SALT: u64 = 0x40de1;
const TRAIN_SALT: u64 = 0x7247;
const ANNOTATE_SALT: u64 = 0xba7c4;
const SAL_BASE_SALT: u64 = 0x9a5e;

fn phase_index(phase: Phase) -> u64 {
    match phase {
        Phase::Baseline => 0,
        Phase::Final => 1,
    }
}

fn join_ids(ids: &[String]) -> String {
    ids.join(",")
}

/// Builds a fresh model and runs the scratch-annotation phase over `pool`.
/// Returns the model restored to its best validation state along with the
/// phase's loop state.
pub fn run_baseline_phase(
    pool: Vec<Sample>,
    val: &[Sample],
    config: &PipelineConfig,
    audit: &mut AuditLog,
) -> Result<(Model<f32>, LoopState), PipelineError> {
    config.validate()?;
    let mut model =
        Model::<f32>::build(&config.arch, derive_seed(config.seed, &[MODEL_SALT]))?;
    let state =
        run_phase(&mut model, Vec::new(), pool, val, config, audit, Phase::Baseline)?;
    Ok((model, state))
}

/// Continues with model-assisted annotation. `model` must clear the assist
/// gate on `val` first; its predictions pre-annotate every batch. `labeled`
/// carries the annotations already paid for in earlier phases.
pub fn run_final_phase(
    model: &mut Model<f32>,
    labeled: Vec<Sample>,
    pool: Vec<Sample>,
    val: &[Sample],
    config: &PipelineConfig,
    audit: &mut AuditLog,
) -> Result<LoopState, PipelineError> {
    config.validate()?;
    let val_miou = validation_miou(model, val)?;
    let passed = mal_gate(val_miou);
    audit.event(
        "gate_check",
        &[
            ("phase", Phase::Final.to_string()),
            ("val_miou", super::fmt_f(val_miou)),
            ("passed", passed.to_string()),
        ],
    );
    if !passed {
        return Err(PipelineError::InvalidConfig(format!(
            "model-assisted phase needs validation mIoU >= {MAL_GATE_MIOU}, got {val_miou:.4}"
        )));
    }
    run_phase(model, labeled, pool, val, config, audit, Phase::Final)
}

fn run_phase(
    model: &mut Model<f32>,
    mut labeled: Vec<Sample>,
    mut pool: Vec<Sample>,
    val: &[Sample],
    config: &PipelineConfig,
    audit: &mut AuditLog,
    phase: Phase,
) -> Result<LoopState, PipelineError> {
    if val.is_empty() {
        return Err(PipelineError::InvalidConfig("validation set is empty".into()));
    }
    if labeled.is_empty() && pool.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    let threshold = match phase {
        Phase::Baseline => config.baseline_threshold_miou,
        Phase::Final => config.final_threshold_miou,
    };
    let pidx = phase_index(phase);
    audit.event(
        "phase_start",
        &[
            ("phase", phase.to_string()),
            ("pool", pool.len().to_string()),
            ("labeled", labeled.len().to_string()),
            ("val", val.len().to_string()),
            ("threshold", super::fmt_f(threshold)),
        ],
    );

    let mut tracker = SalTracker::new(config.sal_low_image_threshold_miou);
    let mut efforts: Vec<EffortRecord> = Vec::new();
    let mut relabel_reports: Vec<RelabelReport> = Vec::new();
    let mut iterations = 0u32;
    let mut sal_rounds = 0u32;
    let mut target_met = false;
    let mut exhausted_pool = false;
    let mut best_val_miou = f64::NEG_INFINITY;
    let mut best_records = None;

    loop {
        iterations += 1;

        if !target_met && !pool.is_empty() {
            let picked = super::select_batch(&pool, Some(model), &config.policy)?;
            let ids: Vec<String> = picked.iter().map(|&i| pool[i].id.clone()).collect();
            audit.event(
                "select",
                &[
                    ("iteration", iterations.to_string()),
                    ("strategy", config.policy.strategy.to_string()),
                    ("count", picked.len().to_string()),
                    ("ids", join_ids(&ids)),
                ],
            );

            let batch: Vec<Sample> = picked.iter().map(|&i| pool[i].clone()).collect();
            let mut to_remove = picked;
            to_remove.sort_unstable_by(|a, b| b.cmp(a));
            for i in to_remove {
                pool.swap_remove(i);
            }

            let mode = match phase {
                Phase::Baseline => AnnotationMode::Scratch,
                Phase::Final => AnnotationMode::Mal,
            };
            let preannotations: Option<Vec<MaskU8>> = match mode {
                AnnotationMode::Scratch => None,
                AnnotationMode::Mal => Some(
                    batch
                        .iter()
                        .map(|s| predict_sample(model, s).map(|p| p.mask))
                        .collect::<Result<_, _>>()?,
                ),
            };
            let batch_seed =
                derive_seed(config.seed, &[ANNOTATE_SALT, pidx, iterations as u64]);
            let (annotated, effort) = annotate_batch(
                batch,
                config.annotators,
                &config.noise,
                mode,
                preannotations.as_deref(),
                batch_seed,
                iterations,
            )?;
            audit.event(
                "annotate",
                &[
                    ("iteration", iterations.to_string()),
                    ("mode", effort.mode.to_string()),
                    ("batch", effort.batch.to_string()),
                    ("corrected_fraction", super::fmt_f(effort.corrected_pixel_fraction)),
                    ("proxy_minutes", super::fmt_f(effort.proxy_minutes)),
                ],
            );
            labeled.extend(annotated);
            efforts.push(effort);
        }

        let train_config = TrainConfig {
            seed: derive_seed(config.seed, &[TRAIN_SALT, pidx, iterations as u64]),
            ..config.train.clone()
        };
        let history = train(model, &labeled, val, &train_config)?;
        let val_miou = history.best_val_miou;
        audit.event(
            "train",
            &[
                ("iteration", iterations.to_string()),
                ("samples", labeled.len().to_string()),
                ("epochs", history.epochs.len().to_string()),
                ("train_loss", super::fmt_f(history.epochs.last().map_or(0.0, |e| e.train_loss))),
                ("val_miou", super::fmt_f(val_miou)),
                ("best_epoch", (history.best_epoch + 1).to_string()),
            ],
        );
        if val_miou > best_val_miou {
            best_val_miou = val_miou;
            best_records = Some(model.to_records());
        }
        if !target_met && gate_decision(val_miou, threshold) {
            target_met = true;
            audit.event(
                "gate",
                &[
                    ("iteration", iterations.to_string()),
                    ("passed", "true".to_string()),
                    ("val_miou", super::fmt_f(val_miou)),
                    ("threshold", super::fmt_f(threshold)),
                ],
            );
            // Assisted labeling exists to reach the target cheaply; once
            // it holds there is nothing left for this phase to do.
            if phase == Phase::Final {
                break;
            }
        }

        if !(target_met || pool.is_empty()) {
            continue;
        }
        if !target_met && !exhausted_pool {
            exhausted_pool = true;
            audit.event("pool_exhausted", &[("iteration", iterations.to_string())]);
        }
        if sal_rounds >= config.sal_max_rounds {
            audit.event(
                "sal_cap",
                &[("iteration", iterations.to_string()), ("rounds", sal_rounds.to_string())],
            );
            break;
        }
        let round = sal_rounds + 1;
        let outcome = tracker.round(
            model,
            &labeled,
            config.sal_copies,
            round,
            derive_seed(config.seed, &[SAL_BASE_SALT, pidx]),
            iterations,
        )?;
        if outcome.copies.is_empty() {
            audit.event(
                "sal_converged",
                &[("iteration", iterations.to_string()), ("round", round.to_string())],
            );
            break;
        }
        sal_rounds = round;
        audit.event(
            "sal_round",
            &[
                ("iteration", iterations.to_string()),
                ("round", round.to_string()),
                ("low", outcome.low_ids.len().to_string()),
                ("copies", outcome.copies.len().to_string()),
                ("low_ids", join_ids(&outcome.low_ids)),
            ],
        );
        if let Some(report) = outcome.report {
            let ids: Vec<String> = report.entries.iter().map(|e| e.id.clone()).collect();
            audit.event(
                "relabel",
                &[
                    ("iteration", iterations.to_string()),
                    ("entries", report.entries.len().to_string()),
                    ("ids", join_ids(&ids)),
                ],
            );
            relabel_reports.push(report);
        }
        labeled.extend(outcome.copies);
    }

    if let Some(records) = best_records {
        *model = Model::from_records(&records)?;
    }
    audit.event(
        "phase_end",
        &[
            ("phase", phase.to_string()),
            ("iterations", iterations.to_string()),
            ("sal_rounds", sal_rounds.to_string()),
            ("best_val_miou", super::fmt_f(best_val_miou)),
            ("target_met", target_met.to_string()),
            ("exhausted", exhausted_pool.to_string()),
        ],
    );
    Ok(LoopState {
        phase,
        iterations,
        sal_rounds,
        best_val_miou,
        target_met,
        exhausted_pool,
        labeled,
        pool,
        efforts,
        relabel_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchConfig, ArchFamily, LossKind};
    use crate::imaging::{ImageData, ImageU8, SplitTag};
    use crate::pipeline::{AnnotatorNoiseSpec, SelectionPolicy, SelectionStrategy};

    /// 32x32 quadrant pattern: class = quadrant, intensity follows class.
    fn quadrant_sample(id: &str, run: &str, timestamp: u32) -> Sample {
        let res = 32usize;
        let mut pixels = vec![0u8; res * res];
        let mut mask = vec![0u8; res * res];
        for h in 0..res {
            for w in 0..res {
                let class = 2 * usize::from(h >= res / 2) + usize::from(w >= res / 2);
                mask[h * res + w] = class as u8;
                pixels[h * res + w] = [0, 85, 170, 255][class];
            }
        }
        Sample {
            id: id.into(),
            run_id: run.into(),
            timestamp_min: timestamp,
            image: ImageData::U8(ImageU8::new(res, res, 1, pixels).unwrap()),
            mask: Some(crate::imaging::MaskU8::new(res, res, mask).unwrap()),
            split: SplitTag::Train,
            provenance: None,
        }
    }

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            policy: SelectionPolicy {
                strategy: SelectionStrategy::TemporalStratified,
                batch_size: 3,
            },
            annotators: 3,
            noise: AnnotatorNoiseSpec {
                boundary_jitter_px: 0,
                region_flip_prob: 0.0,
                pixel_noise_prob: 0.0,
            },
            baseline_threshold_miou: 0.30,
            final_threshold_miou: 0.35,
            sal_max_rounds: 1,
            sal_copies: 1,
            // At 32x32 the fcn8 /32 stage is 1x1 spatial, which batchnorm
            // rejects whenever a batch remainder leaves one sample; the
            // /16 families have no such corner.
            arch: ArchConfig {
                family: ArchFamily::Deeplabv3,
                input_resolution: 32,
                base_width: 4,
                ..ArchConfig::default()
            },
            train: TrainConfig {
                epochs: 4,
                batch_size: 3,
                lr: 3e-4,
                loss: LossKind::CrossEntropy,
                focal_gamma: 2.0,
                seed: 0,
                deterministic_time: true,
            },
            seed: 11,
            ..PipelineConfig::default()
        }
    }

    fn pool_of(n: usize) -> Vec<Sample> {
        (0..n).map(|i| quadrant_sample(&format!("s{i:02}"), "r0", i as u32)).collect()
    }

    #[test]
    fn baseline_phase_acquires_trains_and_audits() {
        let config = tiny_config();
        let val = vec![quadrant_sample("v0", "rv", 0)];
        let mut audit = AuditLog::new();
        let (_, state) = run_baseline_phase(pool_of(6), &val, &config, &mut audit).unwrap();

        assert_eq!(state.phase, Phase::Baseline);
        assert!(state.iterations >= 1);
        assert!(state.sal_rounds <= config.sal_max_rounds);
        assert_eq!(
            state.labeled.iter().filter(|s| s.provenance.is_none()).count() + state.pool.len(),
            6,
            "every original is either labeled or still pooled"
        );
        for effort in &state.efforts {
            assert_eq!(effort.mode, AnnotationMode::Scratch);
            assert_eq!(effort.corrected_pixel_fraction, 1.0);
        }
        let text = audit.to_text();
        assert!(text.starts_with("phase_start phase=baseline pool=6 labeled=0 val=1"));
        assert!(text.contains("\nselect iteration=1 strategy=temporal_stratified count=3"));
        assert!(text.contains("\ntrain iteration=1 samples=3 epochs=4"));
        assert!(text.lines().last().unwrap().starts_with("phase_end phase=baseline"));
        // Quiet annotators copy the ground truth, so labels match exactly.
        for s in &state.labeled {
            assert!(s.mask.is_some());
        }
    }

    #[test]
    fn phases_are_deterministic_end_to_end() {
        let run = || {
            let config = tiny_config();
            let val = vec![quadrant_sample("v0", "rv", 0)];
            let mut audit = AuditLog::new();
            let (model, state) = run_baseline_phase(pool_of(6), &val, &config, &mut audit).unwrap();
            let records = model.to_records();
            (audit.to_text(), state.best_val_miou.to_bits(), records)
        };
        let (audit_a, miou_a, records_a) = run();
        let (audit_b, miou_b, records_b) = run();
        assert_eq!(audit_a, audit_b);
        assert_eq!(miou_a, miou_b);
        assert_eq!(records_a.len(), records_b.len());
        for (a, b) in records_a.iter().zip(&records_b) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data, "weights differ at {}", a.name);
        }
    }

    #[test]
    fn final_phase_requires_the_assist_gate() {
        let config = tiny_config();
        let val = vec![quadrant_sample("v0", "rv", 0)];
        // A fresh model predicts all background on a quadrant image; its
        // validation mIoU (0.25-ish at best) sits far below the gate.
        let mut model = Model::<f32>::build(&config.arch, 0).unwrap();
        let mut audit = AuditLog::new();
        let err =
            run_final_phase(&mut model, Vec::new(), pool_of(3), &val, &config, &mut audit);
        assert!(matches!(err, Err(PipelineError::InvalidConfig(_))));
        assert!(audit.to_text().contains("gate_check phase=final"));
        assert!(audit.to_text().contains("passed=false"));
    }

    #[test]
    fn final_phase_uses_model_assisted_annotation() {
        // Train a model to mastery on the quadrant pattern first; every
        // sample is the same pattern, so it clears the assist gate.
        let config = tiny_config();
        let val = vec![quadrant_sample("v0", "rv", 0)];
        let mut model = Model::<f32>::build(&config.arch, 5).unwrap();
        // The /32 stage of a 32x32 input is 1x1, so batchnorm needs at
        // least two samples per step.
        let warmup = TrainConfig { epochs: 120, batch_size: 2, ..config.train.clone() };
        train(&mut model, &pool_of(2), &val, &warmup).unwrap();
        let gate_miou = validation_miou(&mut model, &val).unwrap();
        assert!(gate_miou >= MAL_GATE_MIOU, "warmup fell short: {gate_miou}");

        let mut audit = AuditLog::new();
        let state = run_final_phase(
            &mut model,
            pool_of(2),
            pool_of(4).split_off(2),
            &val,
            &config,
            &mut audit,
        )
        .unwrap();
        assert_eq!(state.phase, Phase::Final);
        assert!(state.target_met, "an already-strong model meets the 0.35 toy target");
        assert!(!state.efforts.is_empty());
        for effort in &state.efforts {
            assert_eq!(effort.mode, AnnotationMode::Mal);
            // The gated model nails the pattern, so corrections are rare.
            assert!(effort.corrected_pixel_fraction < 0.5, "{}", effort.corrected_pixel_fraction);
            assert!(effort.proxy_minutes < super::super::SCRATCH_MINUTES);
        }
        let text = audit.to_text();
        assert!(text.contains("gate_check phase=final"));
        assert!(text.contains("mode=mal"));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let config = tiny_config();
        let val = vec![quadrant_sample("v0", "rv", 0)];
        let mut audit = AuditLog::new();
        assert!(matches!(
            run_baseline_phase(Vec::new(), &val, &config, &mut audit),
            Err(PipelineError::EmptyPool)
        ));
        assert!(matches!(
            run_baseline_phase(pool_of(2), &[], &config, &mut audit),
            Err(PipelineError::InvalidConfig(_))
        ));
    }
}
