//! `train` and `eval`: single-model training and Table-style scoring.

use crate::arch::{train, ArchConfig, ArchFamily, LossKind, Model, TrainConfig};
use crate::imaging::{read_dataset, Sample, SplitTag};
use crate::metrics::{evaluate_dataset, report_json, table_csv_row, TABLE_CSV_HEADER};
use crate::pipeline::predict_sample;
use crate::seed::derive_seed;

use super::{usage, CliError, Ctx, EvalArgs, TrainArgs};

const MODEL_SALT: u64 = 0x3a0de1;

pub(super) fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> Result<String, CliError> {
    let seed = ctx.required_seed("train")?;
    let arch = arch_from(ctx, args)?;
    let train_config = train_config_from(ctx, args, seed)?;

    let samples = read_dataset(&args.data).map_err(usage)?;
    let train_set: Vec<Sample> =
        samples.iter().filter(|s| s.split == SplitTag::Train).cloned().collect();
    let val_set: Vec<Sample> =
        samples.iter().filter(|s| s.split == SplitTag::Test).cloned().collect();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset needs both train and test tags (found {} train / {} test); run `preprocess` first",
            train_set.len(),
            val_set.len()
        )));
    }

    let mut model =
        Model::<f32>::build(&arch, derive_seed(seed, &[MODEL_SALT])).map_err(usage)?;
    let history = train(&mut model, &train_set, &val_set, &train_config).map_err(usage)?;

    let stem = args
        .name
        .clone()
        .unwrap_or_else(|| format!("{}_{}", arch.family, arch.input_resolution));
    let weights_path = ctx.models_dir()?.join(format!("{stem}.dwgt"));
    model.save(&weights_path).map_err(usage)?;
    let history_path = ctx.reports_dir()?.join(format!("{stem}_history.csv"));
    ctx.write(&history_path, &history.to_csv())?;

    Ok(format!(
        "train family={} resolution={} epochs={} best_val_miou={:.6} weights={} history={}",
        arch.family,
        arch.input_resolution,
        history.epochs.len(),
        history.best_val_miou,
        weights_path.display(),
        history_path.display()
    ))
}

pub(super) fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> Result<String, CliError> {
    let mut model = Model::<f32>::load(&args.weights).map_err(usage)?;
    let samples = read_dataset(&args.data).map_err(usage)?;
    let selected: Vec<&Sample> = match args.split.as_str() {
        "test" => samples.iter().filter(|s| s.split == SplitTag::Test).collect(),
        "train" => samples.iter().filter(|s| s.split == SplitTag::Train).collect(),
        "all" => samples.iter().collect(),
        other => {
            return Err(CliError::Usage(format!(
                "--split must be test, train, or all, not {other}"
            )))
        }
    };
    if selected.is_empty() {
        return Err(CliError::Usage(format!(
            "no samples with split tag {} in {}",
            args.split,
            args.data.display()
        )));
    }

    let mut predictions = Vec::with_capacity(selected.len());
    for sample in &selected {
        let gt = sample.mask.as_ref().ok_or_else(|| {
            CliError::Usage(format!("sample {} has no ground-truth mask", sample.id))
        })?;
        let prediction = predict_sample(&mut model, sample).map_err(usage)?;
        predictions.push((gt.clone(), prediction.mask));
    }
    let pairs: Vec<(&crate::imaging::MaskU8, &crate::imaging::MaskU8)> =
        predictions.iter().map(|(gt, pred)| (gt, pred)).collect();
    let report = evaluate_dataset(&pairs).map_err(usage)?;

    let reports = ctx.reports_dir()?;
    let csv_path = reports.join(format!("{}.csv", args.name));
    let row = table_csv_row(
        model.config.family.as_str(),
        selected.len(),
        model.config.input_resolution,
        &report.aggregate,
    );
    ctx.write(&csv_path, &format!("{TABLE_CSV_HEADER}\n{row}\n"))?;
    let json_path = reports.join(format!("{}.json", args.name));
    ctx.write(&json_path, &report_json(&report))?;

    Ok(format!(
        "eval family={} split={} images={} miou={:.6} csv={} json={}",
        model.config.family,
        args.split,
        report.images,
        report.aggregate.miou.unwrap_or(0.0),
        csv_path.display(),
        json_path.display()
    ))
}

fn arch_from(ctx: &Ctx, args: &TrainArgs) -> Result<ArchConfig, CliError> {
    let mut arch = ctx.file.arch.clone();
    if let Some(family) = &args.family {
        arch.family = ArchFamily::parse(family)
            .ok_or_else(|| CliError::Usage(format!("unknown family {family}")))?;
    }
    if let Some(resolution) = args.resolution {
        arch.input_resolution = resolution;
    }
    if let Some(base_width) = args.base_width {
        arch.base_width = base_width;
    }
    arch.validate().map_err(usage)?;
    Ok(arch)
}

fn train_config_from(ctx: &Ctx, args: &TrainArgs, seed: u64) -> Result<TrainConfig, CliError> {
    let mut config = ctx.file.train.clone();
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(batch_size) = args.batch_size {
        config.batch_size = batch_size;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(loss) = &args.loss {
        config.loss = match loss.as_str() {
            "cross_entropy" => LossKind::CrossEntropy,
            "focal" => LossKind::Focal,
            other => {
                return Err(CliError::Usage(format!(
                    "--loss must be cross_entropy or focal, not {other}"
                )))
            }
        };
    }
    if let Some(gamma) = args.focal_gamma {
        config.focal_gamma = gamma;
    }
    config.seed = seed;
    config.deterministic_time |= ctx.deterministic;
    config.validate().map_err(usage)?;
    Ok(config)
}
