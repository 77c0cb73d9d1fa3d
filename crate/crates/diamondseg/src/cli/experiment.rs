//! `pipeline` and `grid`: the two-phase labeling loop and the family x
//! resolution x augmentation-rate sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{train, ArchConfig, ArchFamily, LossKind, Model, TrainConfig};
use crate::augment::{augment_dataset, AugmentPlan};
use crate::imaging::{read_dataset, write_dataset, MaskU8, Sample, SplitTag};
use crate::metrics::{evaluate_dataset, table_csv_row, TABLE_CSV_HEADER};
use crate::pipeline::{
    effort_csv, mal_gate, predict_sample, relabel_csv, run_baseline_phase, run_final_phase,
    save_versioned, AnnotationMode, AuditLog, SelectionStrategy, MAL_GATE_MIOU, SCRATCH_MINUTES,
};
use crate::preprocess::{preprocess_run, split};
use crate::seed::derive_seed;

use super::{usage, CliError, Ctx, GridArgs, PipelineArgs};

pub(super) fn cmd_pipeline(ctx: &Ctx, args: &PipelineArgs) -> Result<String, CliError> {
    let seed = ctx.required_seed("pipeline")?;
    let mut config = ctx.file.pipeline.clone();
    config.seed = seed;
    if let Some(strategy) = &args.strategy {
        config.policy.strategy = match strategy.as_str() {
            "temporal_stratified" => SelectionStrategy::TemporalStratified,
            "entropy_topk" => SelectionStrategy::EntropyTopk,
            other => {
                return Err(CliError::Usage(format!(
                    "--strategy must be temporal_stratified or entropy_topk, not {other}"
                )))
            }
        };
    }
    if let Some(batch_size) = args.batch_size {
        config.policy.batch_size = batch_size;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    config.train.deterministic_time |= ctx.deterministic;
    config.validate().map_err(usage)?;

    let samples = read_dataset(&args.corpus).map_err(usage)?;
    let mut pool = Vec::new();
    let mut val = Vec::new();
    for sample in samples {
        match sample.split {
            SplitTag::Test => val.push(sample),
            _ => pool.push(sample),
        }
    }
    if val.is_empty() {
        return Err(CliError::Usage(
            "corpus has no test-tagged validation samples; run `preprocess` first".into(),
        ));
    }
    let resolution = config.arch.input_resolution;
    for sample in pool.iter().chain(&val) {
        if sample.image.height() != resolution || sample.image.width() != resolution {
            return Err(CliError::Usage(format!(
                "sample {} is {}x{} but the pipeline runs at {resolution}x{resolution}; \
                 preprocess the corpus to that resolution",
                sample.id,
                sample.image.height(),
                sample.image.width()
            )));
        }
    }

    let store = ctx.models_dir()?.join("pipeline");
    let reports = ctx.reports_dir()?;
    let logs = ctx.logs_dir()?;
    let mut audit = AuditLog::new();

    let (mut model, baseline) =
        run_baseline_phase(pool, &val, &config, &mut audit).map_err(usage)?;
    save_versioned(&store, &model, "baseline").map_err(usage)?;
    ctx.write(&reports.join("effort_baseline.csv"), &effort_csv(&baseline.efforts))?;
    ctx.write(
        &reports.join("relabel_baseline.csv"),
        &relabel_csv(&baseline.relabel_reports),
    )?;

    if !mal_gate(baseline.best_val_miou) {
        // The pool drained before the assist gate: a declared shortfall,
        // reported with full artifacts rather than silently downgraded.
        ctx.write(&logs.join("audit.log"), &audit.to_text())?;
        let mut report = String::from("outcome=ExhaustedPool\n");
        let _ = writeln!(report, "baseline_iterations={}", baseline.iterations);
        let _ = writeln!(report, "baseline_sal_rounds={}", baseline.sal_rounds);
        let _ = writeln!(report, "baseline_best_val_miou={:.6}", baseline.best_val_miou);
        let _ = writeln!(report, "assist_gate_miou={MAL_GATE_MIOU:.2}");
        let _ = writeln!(report, "labeled={}", baseline.labeled.len());
        ctx.write(&reports.join("pipeline_report.txt"), &report)?;
        return Err(CliError::Shortfall(format!(
            "ExhaustedPool: labeled all {} pool images but best validation mIoU {:.6} \
             stayed below the {MAL_GATE_MIOU:.2} assist gate; see {}",
            baseline.labeled.len(),
            baseline.best_val_miou,
            reports.join("pipeline_report.txt").display()
        )));
    }

    let final_state = run_final_phase(
        &mut model,
        baseline.labeled,
        baseline.pool,
        &val,
        &config,
        &mut audit,
    )
    .map_err(usage)?;
    save_versioned(&store, &model, "final").map_err(usage)?;
    ctx.write(&reports.join("effort_final.csv"), &effort_csv(&final_state.efforts))?;
    ctx.write(
        &reports.join("relabel_final.csv"),
        &relabel_csv(&final_state.relabel_reports),
    )?;
    ctx.write(&logs.join("audit.log"), &audit.to_text())?;
    let labeled_dir = ctx.dataset_dir("pipeline_labeled")?;
    write_dataset(&labeled_dir, &final_state.labeled).map_err(usage)?;

    let mal: Vec<_> = final_state
        .efforts
        .iter()
        .filter(|e| e.mode == AnnotationMode::Mal)
        .collect();
    let denom = mal.len().max(1) as f64;
    let mal_mean_fraction =
        mal.iter().map(|e| e.corrected_pixel_fraction).sum::<f64>() / denom;
    let mal_mean_minutes = mal.iter().map(|e| e.proxy_minutes).sum::<f64>() / denom;

    let mut report = String::new();
    let _ = writeln!(
        report,
        "outcome={}",
        if final_state.target_met { "Completed" } else { "FinalTargetUnmet" }
    );
    let _ = writeln!(report, "baseline_iterations={}", baseline.iterations);
    let _ = writeln!(report, "baseline_sal_rounds={}", baseline.sal_rounds);
    let _ = writeln!(report, "baseline_best_val_miou={:.6}", baseline.best_val_miou);
    let _ = writeln!(report, "assist_gate_miou={MAL_GATE_MIOU:.2}");
    let _ = writeln!(report, "final_iterations={}", final_state.iterations);
    let _ = writeln!(report, "final_sal_rounds={}", final_state.sal_rounds);
    let _ = writeln!(report, "final_best_val_miou={:.6}", final_state.best_val_miou);
    let _ = writeln!(report, "final_target_met={}", final_state.target_met);
    let _ = writeln!(report, "exhausted_pool={}", final_state.exhausted_pool);
    let _ = writeln!(report, "labeled={}", final_state.labeled.len());
    let _ = writeln!(report, "mal_batches={}", mal.len());
    let _ = writeln!(report, "mal_mean_corrected_fraction={mal_mean_fraction:.6}");
    let _ = writeln!(report, "mal_mean_proxy_minutes={mal_mean_minutes:.6}");
    let _ = writeln!(report, "scratch_proxy_minutes={SCRATCH_MINUTES:.6}");
    ctx.write(&reports.join("pipeline_report.txt"), &report)?;

    Ok(format!(
        "pipeline gate_miou={:.6} final_best_miou={:.6} final_target_met={} \
         mal_mean_fraction={:.6} mal_mean_minutes={:.6} labeled={} audit={}",
        baseline.best_val_miou,
        final_state.best_val_miou,
        final_state.target_met,
        mal_mean_fraction,
        mal_mean_minutes,
        final_state.labeled.len(),
        logs.join("audit.log").display()
    ))
}

/// The `[grid]` config section: which cells to sweep and the per-cell
/// training budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub families: Vec<ArchFamily>,
    pub resolutions: Vec<usize>,
    pub rates: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub base_width: usize,
    pub loss: LossKind,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            families: ArchFamily::ALL.to_vec(),
            resolutions: vec![64, 128],
            rates: vec![2, 5, 10],
            epochs: 30,
            batch_size: 20,
            lr: 1e-4,
            base_width: 16,
            loss: LossKind::CrossEntropy,
        }
    }
}

const GRID_SPLIT_SALT: u64 = 0x661d;
const GRID_AUG_SALT: u64 = 0xa06;
const GRID_MODEL_SALT: u64 = 0x9d0de1;
const GRID_TRAIN_SALT: u64 = 0x6471;

struct Cell {
    index: usize,
    family: ArchFamily,
    resolution: usize,
    rate: usize,
}

struct CellResult {
    row: String,
    miou: Option<f64>,
    error: Option<String>,
}

pub(super) fn cmd_grid(ctx: &Ctx, args: &GridArgs) -> Result<String, CliError> {
    let seed = ctx.seed.unwrap_or(0);
    let mut grid = ctx.file.grid.clone();
    if let Some(epochs) = args.epochs {
        grid.epochs = epochs;
    }
    if grid.families.is_empty() || grid.resolutions.is_empty() || grid.rates.is_empty() {
        return Err(CliError::Usage(
            "grid needs at least one family, resolution, and augmentation rate".into(),
        ));
    }

    let raw = read_dataset(&args.corpus).map_err(usage)?;
    if raw.is_empty() {
        return Err(CliError::Usage(format!("corpus {} is empty", args.corpus.display())));
    }
    let mut runs: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for sample in raw {
        runs.entry(sample.run_id.clone()).or_default().push(sample);
    }

    // One preprocessed split per resolution, shared by all its cells.
    let mut splits: BTreeMap<usize, (Vec<Sample>, Vec<Sample>)> = BTreeMap::new();
    for (ri, &resolution) in grid.resolutions.iter().enumerate() {
        let mut kept = Vec::new();
        for group in runs.values() {
            let (mut ok, _rejected) =
                preprocess_run(group, &ctx.file.preprocess, resolution).map_err(usage)?;
            kept.append(&mut ok);
        }
        let pair = split(
            kept,
            ctx.file.preprocess.split_test_fraction,
            derive_seed(seed, &[GRID_SPLIT_SALT, ri as u64]),
        )
        .map_err(usage)?;
        splits.insert(resolution, pair);
    }

    // One augmented training set per (resolution, rate), shared by the
    // three families; augmentation is already data-parallel inside.
    let mut augmented: BTreeMap<(usize, usize), Vec<Sample>> = BTreeMap::new();
    for (ri, &resolution) in grid.resolutions.iter().enumerate() {
        for (ki, &rate) in grid.rates.iter().enumerate() {
            let plan = AugmentPlan {
                rate,
                seed: derive_seed(seed, &[GRID_AUG_SALT, ri as u64, ki as u64]),
                ..ctx.file.augment.clone()
            };
            let expanded =
                augment_dataset(&splits[&resolution].0, &plan).map_err(usage)?;
            augmented.insert((resolution, rate), expanded);
        }
    }

    let mut cells = Vec::new();
    for &family in &grid.families {
        for &resolution in &grid.resolutions {
            for &rate in &grid.rates {
                let index = cells.len();
                cells.push(Cell { index, family, resolution, rate });
            }
        }
    }

    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| run_cell(ctx, &grid, seed, cell, &splits, &augmented))
        .collect();

    let mut csv = String::from(TABLE_CSV_HEADER);
    csv.push_str(",augment_rate,seconds\n");
    let mut failed = 0;
    let mut mious: BTreeMap<(ArchFamily, usize, usize), f64> = BTreeMap::new();
    for (cell, result) in cells.iter().zip(&results) {
        if let Some(message) = &result.error {
            failed += 1;
            eprintln!(
                "grid cell {}/{}px/{}x failed: {message}",
                cell.family, cell.resolution, cell.rate
            );
        }
        if let Some(miou) = result.miou {
            mious.insert((cell.family, cell.resolution, cell.rate), miou);
        }
        csv.push_str(&result.row);
        csv.push('\n');
    }
    let reports = ctx.reports_dir()?;
    let csv_path = reports.join("grid.csv");
    ctx.write(&csv_path, &csv)?;

    // Low-vs-high augmentation trend per family and resolution; recorded
    // for inspection, not asserted.
    let rate_lo = *grid.rates.iter().min().expect("rates checked non-empty");
    let rate_hi = *grid.rates.iter().max().expect("rates checked non-empty");
    let mut trend = String::from("family,resolution,rate_low,miou_low,rate_high,miou_high,improved\n");
    for &family in &grid.families {
        for &resolution in &grid.resolutions {
            let lo = mious.get(&(family, resolution, rate_lo));
            let hi = mious.get(&(family, resolution, rate_hi));
            let fmt = |v: Option<&f64>| v.map_or("nan".to_string(), |m| format!("{m:.6}"));
            let improved = match (lo, hi) {
                (Some(l), Some(h)) => (h > l).to_string(),
                _ => "nan".to_string(),
            };
            let _ = writeln!(
                trend,
                "{family},{resolution},{rate_lo},{},{rate_hi},{},{improved}",
                fmt(lo),
                fmt(hi)
            );
        }
    }
    let trend_path = reports.join("grid_trend.csv");
    ctx.write(&trend_path, &trend)?;

    Ok(format!(
        "grid cells={} failed={failed} csv={} trend={}",
        cells.len(),
        csv_path.display(),
        trend_path.display()
    ))
}

fn run_cell(
    ctx: &Ctx,
    grid: &GridConfig,
    seed: u64,
    cell: &Cell,
    splits: &BTreeMap<usize, (Vec<Sample>, Vec<Sample>)>,
    augmented: &BTreeMap<(usize, usize), Vec<Sample>>,
) -> CellResult {
    let start = Instant::now();
    let test = &splits[&cell.resolution].1;
    let train_set = &augmented[&(cell.resolution, cell.rate)];
    match score_cell(ctx, grid, seed, cell, train_set, test) {
        Ok(row_prefix) => {
            let seconds = if ctx.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            let miou = row_prefix.1;
            CellResult {
                row: format!("{},{},{seconds:.3}", row_prefix.0, cell.rate),
                miou,
                error: None,
            }
        }
        Err(err) => {
            let seconds = if ctx.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            CellResult {
                row: format!(
                    "{},{},{},nan,nan,nan,nan,nan,nan,nan,{},{seconds:.3}",
                    cell.family,
                    test.len(),
                    cell.resolution,
                    cell.rate
                ),
                miou: None,
                error: Some(err.message().to_string()),
            }
        }
    }
}

fn score_cell(
    ctx: &Ctx,
    grid: &GridConfig,
    seed: u64,
    cell: &Cell,
    train_set: &[Sample],
    test: &[Sample],
) -> Result<(String, Option<f64>), CliError> {
    let arch = ArchConfig {
        family: cell.family,
        base_width: grid.base_width,
        input_resolution: cell.resolution,
        ..ctx.file.arch.clone()
    };
    arch.validate().map_err(usage)?;
    let train_config = TrainConfig {
        epochs: grid.epochs,
        batch_size: grid.batch_size,
        lr: grid.lr,
        loss: grid.loss,
        seed: derive_seed(seed, &[GRID_TRAIN_SALT, cell.index as u64]),
        deterministic_time: ctx.deterministic || ctx.file.train.deterministic_time,
        ..ctx.file.train.clone()
    };
    train_config.validate().map_err(usage)?;
    let mut model = Model::<f32>::build(
        &arch,
        derive_seed(seed, &[GRID_MODEL_SALT, cell.index as u64]),
    )
    .map_err(usage)?;
    train(&mut model, train_set, test, &train_config).map_err(usage)?;

    let mut predictions: Vec<(MaskU8, MaskU8)> = Vec::with_capacity(test.len());
    for sample in test {
        let gt = sample.mask.clone().ok_or_else(|| {
            CliError::Usage(format!("sample {} has no ground-truth mask", sample.id))
        })?;
        let prediction = predict_sample(&mut model, sample).map_err(usage)?;
        predictions.push((gt, prediction.mask));
    }
    let pairs: Vec<(&MaskU8, &MaskU8)> =
        predictions.iter().map(|(gt, pred)| (gt, pred)).collect();
    let report = evaluate_dataset(&pairs).map_err(usage)?;
    let row = table_csv_row(
        cell.family.as_str(),
        test.len(),
        cell.resolution,
        &report.aggregate,
    );
    Ok((row, report.aggregate.miou))
}
