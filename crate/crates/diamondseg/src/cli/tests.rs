//! Command tests driven through `run_from`, the same path the binary takes.
//! Every invocation gets its own `--out` under a tempdir; assertions read
//! the files the commands claim to write.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::metrics::TABLE_CSV_HEADER;

fn run(args: &[&str]) -> i32 {
    super::run_from(args.iter().copied())
}

fn write_file(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// Single deterministic run: no random frame dropouts, one frame per
/// resampling window (interval matches the preprocessing default).
fn synth_spec(frames: usize) -> String {
    format!(
        "[[run]]\nseed = 7\nframes = {frames}\nframe_interval_min = 15\n\
         blackout_frame_prob = 0.0\nnoise_frame_prob = 0.0\n"
    )
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

/// Sorted (path, size) listing, recursive; cheap fingerprint for
/// "this directory was not touched" assertions.
fn dir_snapshot(dir: &Path) -> Vec<(PathBuf, u64)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let len = fs::metadata(&path).unwrap().len();
                files.push((path, len));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["diamondseg", "--help"]), 0);
    assert_eq!(run(&["diamondseg", "train", "--help"]), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["diamondseg", "--bogus"]), 2);
    assert_eq!(run(&["diamondseg", "eval"]), 2);
    assert_eq!(run(&["diamondseg", "train", "--data", "/nonexistent", "--seed", "1"]), 2);
}

#[test]
fn synth_requires_a_seed() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.toml");
    write_file(&spec, &synth_spec(12));
    let out = tmp.path().join("out");
    let code = run(&["diamondseg", "--out", &p(&out), "synth", "--spec", &p(&spec)]);
    assert_eq!(code, 2);
}

#[test]
fn config_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(
        run(&["diamondseg", "--config", "/nonexistent.toml", "--out", &p(&out), "synth"]),
        2
    );
    let bad = tmp.path().join("bad.toml");
    write_file(&bad, "not = [toml");
    assert_eq!(
        run(&["diamondseg", "--config", &p(&bad), "--out", &p(&out), "synth"]),
        2
    );
}

#[test]
fn synth_is_deterministic_in_the_master_seed() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.toml");
    write_file(&spec, &synth_spec(12));
    let (out_a, out_b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&out_a, &out_b] {
        let code = run(&[
            "diamondseg", "--out", &p(out), "--seed", "21", "synth", "--spec", &p(&spec),
        ]);
        assert_eq!(code, 0);
    }
    let manifest_a = fs::read(out_a.join("datasets/synth/manifest.tsv")).unwrap();
    let manifest_b = fs::read(out_b.join("datasets/synth/manifest.tsv")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    let snap_a = dir_snapshot(&out_a.join("datasets/synth"));
    let snap_b = dir_snapshot(&out_b.join("datasets/synth"));
    let sizes_a: Vec<u64> = snap_a.iter().map(|(_, s)| *s).collect();
    let sizes_b: Vec<u64> = snap_b.iter().map(|(_, s)| *s).collect();
    assert_eq!(sizes_a, sizes_b);
}

#[test]
fn synth_preprocess_train_eval_features_chain() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.toml");
    write_file(&spec, &synth_spec(40));
    let out = tmp.path().join("out");

    let code =
        run(&["diamondseg", "--out", &p(&out), "--seed", "9", "synth", "--spec", &p(&spec)]);
    assert_eq!(code, 0);
    let raw = out.join("datasets/synth");
    assert!(raw.join("manifest.tsv").exists());
    let raw_before = dir_snapshot(&raw);

    let code = run(&[
        "diamondseg", "--out", &p(&out), "--seed", "9", "preprocess", "--in", &p(&raw),
        "--resolution", "64", "--name", "proc",
    ]);
    assert_eq!(code, 0);
    assert_eq!(dir_snapshot(&raw), raw_before, "preprocess wrote into its input");
    let proc = out.join("datasets/proc");
    assert!(proc.join("manifest.tsv").exists());
    let rejects = fs::read_to_string(out.join("reports/proc_rejects.csv")).unwrap();
    assert!(rejects.starts_with("id,run_id,timestamp_min,reason"));

    let code = run(&[
        "diamondseg", "--out", &p(&out), "--seed", "9", "train", "--data", &p(&proc),
        "--family", "deeplabv3", "--resolution", "64", "--base-width", "4",
        "--epochs", "1", "--batch-size", "8", "--name", "tiny",
    ]);
    assert_eq!(code, 0);
    let weights = out.join("models/tiny.dwgt");
    assert!(weights.exists());
    let history = fs::read_to_string(out.join("reports/tiny_history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_miou,seconds"));
    assert_eq!(history.lines().count(), 2);

    let code = run(&[
        "diamondseg", "--out", &p(&out), "eval", "--weights", &p(&weights), "--data",
        &p(&proc), "--name", "tinyeval",
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("reports/tinyeval.csv")).unwrap();
    assert!(csv.starts_with(TABLE_CSV_HEADER));
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("deeplabv3,"));
    assert!(out.join("reports/tinyeval.json").exists());
    let code = run(&[
        "diamondseg", "--out", &p(&out), "eval", "--weights", &p(&weights), "--data",
        &p(&proc), "--split", "bogus",
    ]);
    assert_eq!(code, 2);

    let code = run(&[
        "diamondseg", "--out", &p(&out), "features", "--data", &p(&proc), "--svg",
        "--name", "feat",
    ]);
    assert_eq!(code, 0);
    let feat = fs::read_to_string(out.join("reports/feat.csv")).unwrap();
    assert!(feat.starts_with("timestamp_min,area_top,area_side,"));
    assert!(feat.lines().count() >= 2);
    let svg = fs::read_to_string(out.join("reports/feat.svg")).unwrap();
    assert!(svg.contains("<svg"));
}

/// An underpowered pipeline (one epoch per iteration at the lr floor) can
/// not reach the assist gate, so the command must drain its pool, file the
/// shortfall report, and exit 3.
#[test]
fn pipeline_reports_a_pool_shortfall_with_exit_three() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.toml");
    write_file(&spec, &synth_spec(30));
    let out = tmp.path().join("out");
    assert_eq!(
        run(&["diamondseg", "--out", &p(&out), "--seed", "3", "synth", "--spec", &p(&spec)]),
        0
    );
    assert_eq!(
        run(&[
            "diamondseg", "--out", &p(&out), "--seed", "3", "preprocess", "--in",
            &p(&out.join("datasets/synth")), "--resolution", "32", "--name", "proc32",
        ]),
        0
    );

    let config = tmp.path().join("config.toml");
    write_file(
        &config,
        "[pipeline]\nsal_max_rounds = 1\nsal_copies = 1\n\n\
         [pipeline.policy]\nstrategy = \"temporal_stratified\"\nbatch_size = 8\n\n\
         [pipeline.arch]\nfamily = \"deeplabv3\"\nbase_width = 4\ninput_resolution = 32\n\n\
         [pipeline.train]\nepochs = 1\nbatch_size = 4\nlr = 6e-6\n",
    );
    let code = run(&[
        "diamondseg", "--config", &p(&config), "--out", &p(&out), "--seed", "3",
        "--deterministic", "pipeline", "--corpus", &p(&out.join("datasets/proc32")),
    ]);
    assert_eq!(code, 3);

    let audit = fs::read_to_string(out.join("logs/audit.log")).unwrap();
    assert!(audit.contains("phase_start phase=baseline"));
    assert!(audit.contains("pool_exhausted"));
    let report = fs::read_to_string(out.join("reports/pipeline_report.txt")).unwrap();
    assert!(report.starts_with("outcome=ExhaustedPool"));
    let effort = fs::read_to_string(out.join("reports/effort_baseline.csv")).unwrap();
    assert!(effort.lines().count() >= 2);
    assert!(effort.contains(",scratch,"));
    assert!(out.join("models/pipeline/v001_baseline.dwgt").exists());
}

#[test]
fn grid_writes_all_rows_and_the_trend() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.toml");
    write_file(&spec, &synth_spec(20));
    let out = tmp.path().join("out");
    assert_eq!(
        run(&["diamondseg", "--out", &p(&out), "--seed", "4", "synth", "--spec", &p(&spec)]),
        0
    );
    let raw = p(&out.join("datasets/synth"));

    let config = tmp.path().join("config.toml");
    write_file(
        &config,
        "[grid]\nfamilies = [\"deeplabv3\"]\nresolutions = [32]\nrates = [1, 2]\n\
         epochs = 1\nbatch_size = 4\nlr = 6e-6\nbase_width = 4\n",
    );
    let run_grid = |out: &Path| {
        run(&[
            "diamondseg", "--config", &p(&config), "--out", &p(out), "--seed", "4",
            "--deterministic", "grid", "--corpus", &raw,
        ])
    };
    assert_eq!(run_grid(&out), 0);

    let csv = fs::read_to_string(out.join("reports/grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], format!("{TABLE_CSV_HEADER},augment_rate,seconds"));
    assert_eq!(lines.len(), 3, "one header plus one row per cell");
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[0], "deeplabv3");
        assert_eq!(fields[2], "32");
        assert!(fields[10] == "1" || fields[10] == "2");
        assert_eq!(fields[11], "0.000", "deterministic mode zeroes wall time");
    }
    let trend = fs::read_to_string(out.join("reports/grid_trend.csv")).unwrap();
    let tlines: Vec<&str> = trend.lines().collect();
    assert_eq!(tlines[0], "family,resolution,rate_low,miou_low,rate_high,miou_high,improved");
    assert_eq!(tlines.len(), 2);
    assert!(tlines[1].starts_with("deeplabv3,32,1,"));
    let improved = tlines[1].rsplit(',').next().unwrap();
    assert!(["true", "false", "nan"].contains(&improved));

    // Same seed and corpus, fresh output root: identical artifacts.
    let out2 = tmp.path().join("out2");
    assert_eq!(run_grid(&out2), 0);
    assert_eq!(csv, fs::read_to_string(out2.join("reports/grid.csv")).unwrap());
    assert_eq!(trend, fs::read_to_string(out2.join("reports/grid_trend.csv")).unwrap());
}
