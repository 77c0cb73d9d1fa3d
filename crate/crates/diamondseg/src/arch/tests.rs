use super::*;
use crate::imaging::SplitTag;

fn config_for(family: ArchFamily) -> ArchConfig {
    ArchConfig { family, ..ArchConfig::default() }
}

/// Quadrant image: four flat intensity plateaus, one per class, so a model
/// can separate classes from brightness alone.
fn quadrant_sample(id: &str, resolution: usize) -> Sample {
    let mut pixels = vec![0.0f32; resolution * resolution];
    let mut classes = vec![0u8; resolution * resolution];
    let half = resolution / 2;
    for h in 0..resolution {
        for w in 0..resolution {
            let class = 2 * usize::from(h >= half) + usize::from(w >= half);
            classes[h * resolution + w] = class as u8;
            pixels[h * resolution + w] = -1.0 + 2.0 * class as f32 / 3.0;
        }
    }
    Sample {
        id: id.to_string(),
        run_id: "r0".to_string(),
        timestamp_min: 0,
        image: ImageData::F32(ImageF32::new(resolution, resolution, 1, pixels).unwrap()),
        mask: Some(MaskU8::new(resolution, resolution, classes).unwrap()),
        split: SplitTag::Train,
        provenance: None,
    }
}

fn random_input(n: usize, resolution: usize, seed: u64) -> Tensor4<f32> {
    Tensor4::random_uniform(n, 1, resolution, resolution, -1.0, 1.0, seed)
}

#[test]
fn config_validation_rejects_bad_shapes() {
    assert!(ArchConfig::default().validate().is_ok());

    let cases: &[(ArchConfig, &str)] = &[
        (ArchConfig { num_classes: 5, ..ArchConfig::default() }, "num_classes"),
        (ArchConfig { base_width: 5, ..ArchConfig::default() }, "base_width"),
        (ArchConfig { base_width: 2, ..ArchConfig::default() }, "base_width"),
        (ArchConfig { input_resolution: 40, ..ArchConfig::default() }, "input_resolution"),
        (ArchConfig { input_resolution: 16, ..ArchConfig::default() }, "input_resolution"),
        (ArchConfig { aspp_rates: vec![], ..ArchConfig::default() }, "aspp_rates"),
        (ArchConfig { aspp_rates: vec![1, 0], ..ArchConfig::default() }, "aspp_rates"),
    ];
    for (config, needle) in cases {
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains(needle), "{err:?} should mention {needle}");
    }

    // 48 is a multiple of 16 but not of 32: only the /32 family rejects it.
    let c48 = ArchConfig { input_resolution: 48, ..config_for(ArchFamily::Fcn8) };
    assert!(c48.validate().unwrap_err().to_string().contains("divisible by 32"));
    for family in [ArchFamily::Deeplabv3, ArchFamily::Deeplabv3plus] {
        let c = ArchConfig { input_resolution: 48, ..config_for(family) };
        assert!(c.validate().is_ok(), "{family} should accept 48");
    }
}

#[test]
fn family_names_roundtrip() {
    for family in ArchFamily::ALL {
        assert_eq!(ArchFamily::parse(family.as_str()), Some(family));
        assert_eq!(family.to_string(), family.as_str());
    }
    assert_eq!(ArchFamily::parse("unet"), None);
    let json = serde_json::to_string(&ArchFamily::Deeplabv3plus).unwrap();
    assert_eq!(json, "\"deeplabv3plus\"");
}

#[test]
fn logits_match_input_resolution_for_all_families() {
    let x = random_input(2, 64, 11);
    for family in ArchFamily::ALL {
        let mut model = Model::<f32>::build(&config_for(family), 3).unwrap();
        let y = model.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(y.dims(), (2, 4, 64, 64), "{family}");

        let bad = random_input(1, 32, 11);
        assert!(matches!(
            model.forward(&bad, BnMode::Eval),
            Err(ArchError::ShapeMismatch(_))
        ));
    }
}

#[test]
fn same_seed_builds_identical_models() {
    let config = config_for(ArchFamily::Deeplabv3);
    let a = Model::<f32>::build(&config, 7).unwrap().to_records();
    let b = Model::<f32>::build(&config, 7).unwrap().to_records();
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.name, rb.name);
        assert_eq!(ra.data, rb.data, "{} differs across same-seed builds", ra.name);
    }
    let c = Model::<f32>::build(&config, 8).unwrap().to_records();
    assert!(
        a.iter().zip(&c).any(|(ra, rc)| ra.data != rc.data),
        "different seeds should give different weights"
    );
}

#[test]
fn eval_forward_is_idempotent() {
    let x = random_input(1, 64, 5);
    let mut model = Model::<f32>::build(&config_for(ArchFamily::Deeplabv3plus), 1).unwrap();
    let y1 = model.forward(&x, BnMode::Eval).unwrap();
    let y2 = model.forward(&x, BnMode::Eval).unwrap();
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn save_load_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dwgt");
    let x = random_input(1, 64, 21);
    for family in ArchFamily::ALL {
        let mut model = Model::<f32>::build(&config_for(family), 9).unwrap();
        let y_before = model.forward(&x, BnMode::Eval).unwrap();
        model.save(&path).unwrap();
        let mut back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.param_count(), model.param_count());
        let y_after = back.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(y_before.data(), y_after.data(), "{family} output changed");
    }
}

#[test]
fn from_records_rejects_malformed_files() {
    let model = Model::<f32>::build(&config_for(ArchFamily::Fcn8), 2).unwrap();
    let mut records = model.to_records();

    let without_config: Vec<WeightRecord> =
        records.iter().skip(1).cloned().collect();
    let Err(err) = Model::<f32>::from_records(&without_config) else {
        panic!("a file without a config record should not load");
    };
    assert!(err.to_string().contains("no config record"), "{err}");

    records.push(WeightRecord::from_vec("stowaway", &[1.0]));
    let Err(err) = Model::<f32>::from_records(&records) else {
        panic!("a file with unknown tensors should not load");
    };
    assert!(err.to_string().contains("does not use"), "{err}");
}

#[test]
fn argmax_breaks_ties_toward_lowest_class() {
    // All four logits equal: class 0 wins. Classes 1 and 3 tied above the
    // rest: class 1 wins.
    let mut logits = Tensor4::<f32>::zeros(1, 4, 1, 2);
    for c in 0..4 {
        *logits.at_mut(0, c, 0, 1) = if c == 1 || c == 3 { 2.0 } else { 0.0 };
    }
    let masks = argmax_masks(&logits);
    assert_eq!(masks.len(), 1);
    assert_eq!(masks[0].data(), &[0, 1]);
}

#[test]
fn predict_mask_reports_confidence_signals() {
    let mut model = Model::<f32>::build(&config_for(ArchFamily::Deeplabv3), 4).unwrap();
    let pixels = vec![0.25f32; 64 * 64];
    let image = ImageF32::new(64, 64, 1, pixels).unwrap();
    let pred = model.predict_mask(&image).unwrap();
    assert_eq!(pred.mask.height(), 64);
    assert_eq!(pred.mask.width(), 64);
    assert!(pred.mask.data().iter().all(|&c| c < 4));
    // The winning class of a 4-way softmax holds at least 1/4 of the mass.
    assert!(pred.max_prob.iter().all(|&p| (0.25..=1.0).contains(&p)));
    // Slack covers f32 accumulation: an untrained model with zeroed heads
    // is exactly uniform, and f32's ln(4) rounds a hair above f64's.
    let max_entropy = (NUM_CLASSES as f64).ln() + 1e-6;
    assert!((0.0..=max_entropy).contains(&pred.mean_entropy), "{}", pred.mean_entropy);

    let rgb = ImageF32::new(64, 64, 3, vec![0.0; 64 * 64 * 3]).unwrap();
    assert!(matches!(model.predict_mask(&rgb), Err(ArchError::ShapeMismatch(_))));
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let cases = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { epochs: 201, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr: 1e-7, ..TrainConfig::default() },
        TrainConfig { lr: 1e-3, ..TrainConfig::default() },
        TrainConfig { focal_gamma: -0.5, ..TrainConfig::default() },
    ];
    for config in cases {
        assert!(matches!(config.validate(), Err(ArchError::InvalidConfig(_))));
    }
}

#[test]
fn train_rejects_bad_datasets() {
    let mut model = Model::<f32>::build(&config_for(ArchFamily::Deeplabv3), 0).unwrap();
    let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let good = quadrant_sample("a", 64);

    let err = train(&mut model, &[], &[good.clone()], &config).unwrap_err();
    assert!(matches!(err, ArchError::EmptyDataset));

    let mut unmasked = good.clone();
    unmasked.mask = None;
    let err = train(&mut model, &[unmasked], &[good.clone()], &config).unwrap_err();
    assert!(matches!(err, ArchError::MissingMask(ref id) if id == "a"));

    let tiny = quadrant_sample("b", 32);
    let err = train(&mut model, &[tiny], &[good], &config).unwrap_err();
    assert!(matches!(err, ArchError::ShapeMismatch(_)));
}

#[test]
fn tape_from_another_family_is_rejected() {
    let x = random_input(1, 64, 1);
    let fcn = Model::<f32>::build(&config_for(ArchFamily::Fcn8), 0).unwrap();
    let mut v3 = Model::<f32>::build(&config_for(ArchFamily::Deeplabv3), 0).unwrap();
    let (logits, tape) = v3.forward_train(&x).unwrap();
    let dlogits = Tensor4::<f32>::zeros(
        logits.dims().0,
        logits.dims().1,
        logits.dims().2,
        logits.dims().3,
    );
    let err = fcn.backward(&tape, &dlogits).unwrap_err();
    assert!(err.to_string().contains("different model family"));
}

#[test]
fn param_counts_distinguish_families() {
    let v3 = Model::<f32>::build(&config_for(ArchFamily::Deeplabv3), 0).unwrap();
    let v3p = Model::<f32>::build(&config_for(ArchFamily::Deeplabv3plus), 0).unwrap();
    assert!(
        v3p.param_count() > v3.param_count(),
        "decoder should add parameters: {} vs {}",
        v3p.param_count(),
        v3.param_count()
    );
    let summary = v3p.summary();
    assert!(summary.contains("deeplabv3plus"));
    assert!(summary.contains(&format!("params={}", v3p.param_count())));

    // Adam needs one gradient group per parameter slice, in matching order.
    let mut v3p = v3p;
    let x = random_input(1, 64, 3);
    let (logits, tape) = v3p.forward_train(&x).unwrap();
    let targets = vec![0u8; 64 * 64];
    let (_, dlogits) = cross_entropy_loss(&logits, &targets).unwrap();
    let grads = v3p.backward(&tape, &dlogits).unwrap();
    let params = v3p.param_slices();
    assert_eq!(grads.len(), params.len());
    for (g, p) in grads.iter().zip(&params) {
        assert_eq!(g.len(), p.len());
    }
    assert_eq!(params.iter().map(|p| p.len()).sum::<usize>(), v3p.param_count());
}

#[test]
fn training_reduces_loss_and_reports_history() {
    let samples: Vec<Sample> =
        (0..4).map(|i| quadrant_sample(&format!("s{i}"), 64)).collect();
    let mut model = Model::<f32>::build(&config_for(ArchFamily::Fcn8), 42).unwrap();
    let config = TrainConfig {
        epochs: 6,
        batch_size: 2,
        lr: 3e-4,
        deterministic_time: true,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &samples, &samples, &config).unwrap();

    assert_eq!(history.epochs.len(), 6);
    let first = history.epochs[0].train_loss;
    let last = history.epochs[5].train_loss;
    assert!(last < first, "loss should drop: {first} -> {last}");
    assert!(history.best_epoch < 6);
    assert!((0.0..=1.0).contains(&history.best_val_miou));
    assert!(history.epochs.iter().all(|e| e.seconds == 0.0));

    let csv = history.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_miou,seconds"));
    let first_row = lines.next().unwrap();
    assert!(first_row.starts_with("1,"), "{first_row}");
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn training_is_deterministic() {
    let samples: Vec<Sample> =
        (0..3).map(|i| quadrant_sample(&format!("s{i}"), 64)).collect();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr: 2e-4,
        loss: LossKind::Focal,
        deterministic_time: true,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Model::<f32>::build(&config_for(ArchFamily::Deeplabv3), 13).unwrap();
        let history = train(&mut model, &samples, &samples, &config).unwrap();
        (history.to_csv(), model.to_records())
    };
    let (csv_a, records_a) = run();
    let (csv_b, records_b) = run();
    assert_eq!(csv_a, csv_b);
    for (ra, rb) in records_a.iter().zip(&records_b) {
        assert_eq!(ra.data, rb.data, "{} differs across reruns", ra.name);
    }
}

#[test]
fn single_sample_training_makes_rapid_progress() {
    let sample = vec![quadrant_sample("only", 64)];
    let mut model = Model::<f32>::build(&config_for(ArchFamily::Fcn8), 0).unwrap();
    let config = TrainConfig {
        epochs: 60,
        batch_size: 1,
        lr: 3e-4,
        deterministic_time: true,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &sample, &sample, &config).unwrap();
    let first = history.epochs[0].train_loss;
    let last = history.epochs.last().unwrap().train_loss;
    assert!(
        last < 0.65 * first,
        "single-sample loss should collapse: {first} -> {last}"
    );
    assert!(
        history.best_val_miou > 0.7,
        "quadrants should be mostly learned, got {}",
        history.best_val_miou
    );
}
