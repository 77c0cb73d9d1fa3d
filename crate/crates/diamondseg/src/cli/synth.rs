//! `synth`: render growth runs into `<out>/datasets/<name>/`.

use std::fs;

use crate::imaging::write_dataset;
use crate::seed::derive_seed;
use crate::synthgen::{generate_run, GrowthRunSpec};

use super::{usage, CliError, Ctx, SynthArgs, SynthSection};

const RUN_SALT: u64 = 0x12a;

pub(super) fn cmd_synth(ctx: &Ctx, args: &SynthArgs) -> Result<String, CliError> {
    let seed = ctx.required_seed("synth")?;
    let section: SynthSection = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read spec {}: {e}", path.display()))
            })?;
            toml::from_str(&text).map_err(|e| {
                CliError::Usage(format!("invalid spec {}: {e}", path.display()))
            })?
        }
        None => ctx.file.synth.clone(),
    };
    if section.run.is_empty() {
        return Err(CliError::Usage(
            "no runs to render: pass --spec or a config with [[synth.run]] tables".into(),
        ));
    }

    let mut samples = Vec::new();
    for (i, run) in section.run.iter().enumerate() {
        // The master seed owns reproducibility; the spec's per-run seed
        // only separates runs that are otherwise identical.
        let spec = GrowthRunSpec {
            seed: derive_seed(seed, &[RUN_SALT, i as u64, run.seed]),
            ..run.clone()
        };
        samples.extend(generate_run(&spec).map_err(usage)?);
    }

    let degenerate = samples
        .iter()
        .filter(|s| {
            s.mask
                .as_ref()
                .is_none_or(|m| m.data().iter().all(|&c| c == 0))
        })
        .count();
    let dir = ctx.dataset_dir(&args.name)?;
    write_dataset(&dir, &samples).map_err(usage)?;
    Ok(format!(
        "synth runs={} frames={} degenerate={} dir={}",
        section.run.len(),
        samples.len(),
        degenerate,
        dir.display()
    ))
}
