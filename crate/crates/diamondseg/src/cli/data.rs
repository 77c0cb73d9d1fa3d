//! `preprocess` and `features`: dataset conditioning and the derived
//! feature time series.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::arch::Model;
use crate::geometry::{features_csv, run_features, svg_area_chart, ShapeThresholds};
use crate::imaging::{read_dataset, write_dataset, MaskU8, Sample};
use crate::pipeline::predict_sample;
use crate::preprocess::{preprocess_run, split};
use crate::seed::derive_seed;

use super::{usage, CliError, Ctx, FeaturesArgs, PreprocessArgs};

const SPLIT_SALT: u64 = 0x5b11;

pub(super) fn cmd_preprocess(ctx: &Ctx, args: &PreprocessArgs) -> Result<String, CliError> {
    let config = &ctx.file.preprocess;
    let resolution = match args.resolution {
        Some(r) => r,
        None => *config.target_resolutions.first().ok_or_else(|| {
            CliError::Usage("config lists no target_resolutions".into())
        })?,
    };
    let raw = read_dataset(&args.input).map_err(usage)?;
    if raw.is_empty() {
        return Err(CliError::Usage(format!(
            "no samples under {}",
            args.input.display()
        )));
    }

    // Runs are independent timelines; resampling windows must not span
    // run boundaries.
    let mut runs: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for sample in raw {
        runs.entry(sample.run_id.clone()).or_default().push(sample);
    }
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for run in runs.values() {
        let (k, r) = preprocess_run(run, config, resolution).map_err(usage)?;
        kept.extend(k);
        rejected.extend(r);
    }

    let split_seed = match ctx.seed {
        Some(seed) => derive_seed(seed, &[SPLIT_SALT]),
        None => config.split_seed,
    };
    let (train, test) = split(kept, config.split_test_fraction, split_seed).map_err(usage)?;
    let (train_len, test_len) = (train.len(), test.len());
    let mut out_samples = train;
    out_samples.extend(test);

    let dir = ctx.dataset_dir(&args.name)?;
    write_dataset(&dir, &out_samples).map_err(usage)?;

    let mut report = String::from("id,run_id,timestamp_min,reason\n");
    for (sample, reason) in &rejected {
        let _ = writeln!(
            report,
            "{},{},{},{}",
            sample.id,
            sample.run_id,
            sample.timestamp_min,
            reason.as_str()
        );
    }
    let report_path = ctx.reports_dir()?.join(format!("{}_rejects.csv", args.name));
    ctx.write(&report_path, &report)?;

    Ok(format!(
        "preprocess kept={} rejected={} train={} test={} resolution={} dir={}",
        train_len + test_len,
        rejected.len(),
        train_len,
        test_len,
        resolution,
        dir.display()
    ))
}

pub(super) fn cmd_features(ctx: &Ctx, args: &FeaturesArgs) -> Result<String, CliError> {
    let samples = read_dataset(&args.data).map_err(usage)?;
    let mut runs: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for sample in &samples {
        runs.entry(&sample.run_id).or_default().push(sample);
    }
    let mut run = match (&args.run, runs.len()) {
        (Some(id), _) => runs.remove(id.as_str()).ok_or_else(|| {
            CliError::Usage(format!("run {id} not found; dataset has {:?}", runs.keys()))
        })?,
        (None, 1) => runs.into_values().next().expect("len checked"),
        (None, 0) => return Err(CliError::Usage("dataset holds no samples".into())),
        (None, n) => {
            return Err(CliError::Usage(format!(
                "dataset holds {n} runs; pick one with --run"
            )))
        }
    };
    run.sort_by(|a, b| (a.timestamp_min, &a.id).cmp(&(b.timestamp_min, &b.id)));

    let mode;
    let frames: Vec<(u32, MaskU8)> = match &args.weights {
        Some(path) => {
            mode = "predicted";
            let mut model = Model::<f32>::load(path).map_err(usage)?;
            run.iter()
                .map(|s| Ok((s.timestamp_min, predict_sample(&mut model, s)?.mask)))
                .collect::<Result<_, crate::pipeline::PipelineError>>()
                .map_err(usage)?
        }
        None => {
            mode = "ground_truth";
            run.iter()
                .map(|s| {
                    let mask = s.mask.clone().ok_or_else(|| {
                        CliError::Usage(format!("sample {} has no mask; pass --weights", s.id))
                    })?;
                    Ok((s.timestamp_min, mask))
                })
                .collect::<Result<_, CliError>>()?
        }
    };

    let rows = run_features(&frames, &ShapeThresholds::default());
    let reports = ctx.reports_dir()?;
    let csv_path = reports.join(format!("{}.csv", args.name));
    ctx.write(&csv_path, &features_csv(&rows))?;

    let mut svg_note = String::new();
    if args.svg {
        let svg_path = reports.join(format!("{}.svg", args.name));
        ctx.write(&svg_path, &svg_area_chart(&rows))?;
        svg_note = format!(" svg={}", svg_path.display());
    }
    Ok(format!(
        "features run_frames={} mode={} csv={}{}",
        rows.len(),
        mode,
        csv_path.display(),
        svg_note
    ))
}
