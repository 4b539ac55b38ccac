use super::*;
use crate::synth::{generate_texture_corpus, synthesize_sample};

fn samples(n: usize, size: usize) -> Vec<TrainSample> {
    let imgs = generate_texture_corpus(n, 5, (size, size)).unwrap();
    imgs.iter()
        .enumerate()
        .map(|(i, img)| {
            let s = synthesize_sample(img, 10 + i as u64, DensityLevel::ALL[i % 3]).unwrap();
            TrainSample::from_synth(format!("{i:06}"), &s).unwrap()
        })
        .collect()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, 100, &cfg).unwrap(), 1e-3);
    assert!((lr_at(100, 100, &cfg).unwrap() - 1e-6).abs() < 1e-18);
    let mid = lr_at(50, 100, &cfg).unwrap();
    assert!((mid - 0.5 * (1e-3 + 1e-6)).abs() < 1e-15);
    assert!(lr_at(101, 100, &cfg).is_err());
    let mut prev = f64::INFINITY;
    for s in 0..=100 {
        let lr = lr_at(s, 100, &cfg).unwrap();
        assert!(lr <= prev && lr >= cfg.lr_min);
        prev = lr;
    }
}

#[test]
fn loss_examples() {
    let clean = ImageRgb::from_fn(4, 4, |y, x| [0.2 + 0.05 * x as f64, 0.3, 0.1 + 0.05 * y as f64]);
    let mask = SmokeMaskImage::new(ImageRgb::filled(4, 4, 0.2)).unwrap();
    let shifted = clean.map(|v| v + 0.1);
    let pred = HgeOutput {
        desmoked: shifted.clone(),
        desmoked_unclamped: shifted,
        smoke_mask: mask.clone(),
        coefficients: crate::asm::ResidualCoefficients::zeros(4, 4),
        epsilon: crate::asm::ReconstructionBias::ZERO,
    };
    let l = total_loss(&pred, &clean, &mask, LossWeights::default()).unwrap();
    assert!((l.image - 0.01).abs() < 1e-15);
    assert_eq!(l.mask, 0.0);
    assert!((l.lightness - 0.01).abs() < 1e-15);
    assert!((l.total - 0.02).abs() < 1e-15);
    let w = LossWeights {
        alpha_s: 0.0,
        alpha_l: 0.0,
    };
    assert_eq!(total_loss(&pred, &clean, &mask, w).unwrap().total, l.image);
}

#[test]
fn graph_loss_matches_value_loss() {
    let mut model = Model::new(ModelConfig::tiny(), 1).unwrap();
    for t in model.params_mut().values_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f64 - 3.0);
        }
    }
    let w = LossWeights {
        alpha_s: 0.7,
        alpha_l: 1.3,
    };
    for s in samples(3, 16) {
        let (loss, _) = sample_gradients(&model, &s, w).unwrap();
        let out = model.forward(&s.input).unwrap();
        let v = total_loss(&out, &s.clean, &s.mask, w).unwrap();
        assert_eq!(loss, v.total);
    }
}

#[test]
fn initial_loss_is_the_do_nothing_baseline() {
    let model = Model::new(ModelConfig::tiny(), 2).unwrap();
    for s in samples(3, 16) {
        let (loss, _) = sample_gradients(&model, &s, LossWeights::default()).unwrap();
        assert_eq!(loss, s.baseline_loss(LossWeights::default()).unwrap().total);
    }
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let set = samples(6, 16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg();
    let out = train_samples(&set[..4], &set[4..], &cfg, ModelConfig::tiny(), Some(dir.path())).unwrap();
    let s = &out.summary;
    assert_eq!(s.history.len(), 2);
    assert_eq!(s.steps, 4);
    assert_eq!(s.initial_loss, s.baseline_loss);
    assert!(s.history.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_some()));
    let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: EpochRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first, s.history[0]);

    let last = Checkpoint::load(&dir.path().join("last")).unwrap();
    assert_eq!(last.meta.epoch, 2);
    assert_eq!(&last.params, out.model.params());
    assert_eq!(last.id(), "last:full:seed3:epoch2");
    let best = Checkpoint::load(&dir.path().join("best")).unwrap();
    assert_eq!(best.meta.epoch, s.best_epoch);
    let reloaded = last.model().unwrap();
    let img = &set[0].input;
    assert_eq!(reloaded.forward(img).unwrap(), out.model.forward(img).unwrap());
    let summary: TrainSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(&summary, s);
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let set = samples(5, 16);
    let run = |exec| {
        let cfg = TrainConfig { exec, ..quick_cfg() };
        train_samples(&set, &[], &cfg, ModelConfig::tiny(), None).unwrap()
    };
    let a = run(Execution::Sequential);
    let b = run(Execution::Parallel);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.summary, b.summary);
    assert!(a.summary.history.iter().all(|r| r.val_loss.is_none()));
}

#[test]
fn ablations_come_from_the_train_config() {
    let set = samples(2, 16);
    let cfg = TrainConfig {
        epochs: 1,
        ablations: Ablations::only(crate::model::Ablation::NoRft),
        ..quick_cfg()
    };
    let out = train_samples(&set, &[], &cfg, ModelConfig::tiny(), None).unwrap();
    assert!(out.model.config().ablations.no_rft);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let set = samples(2, 16);
    let cfg = TrainConfig {
        epochs: 1,
        lr_init: 1e300,
        lr_min: 1e300,
        ..quick_cfg()
    };
    let mut big = set.clone();
    big.extend(samples(4, 16));
    match train_samples(&big, &[], &cfg, ModelConfig::tiny(), None) {
        Err(Error::NonFiniteLoss { epoch, samples, .. }) => {
            assert_eq!(epoch, 1);
            assert!(!samples.is_empty());
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.summary)),
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr_min: 1.0, ..TrainConfig::default() },
        TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
        TrainConfig { lr_init: f64::NAN, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn checkpoint_rejects_other_versions() {
    let model = Model::new(ModelConfig::tiny(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::new(&model, &TrainConfig::default(), "best", 0, 0, None);
    ck.save(dir.path()).unwrap();
    assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
    let meta = dir.path().join(META_FILE);
    let text = fs::read_to_string(&meta).unwrap().replace("\"version\": \"1\"", "\"version\": \"0\"");
    fs::write(&meta, text).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Version { .. })));
}

#[test]
fn split_holds_out_whole_sources() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = generate_texture_corpus(8, 1, (16, 16)).unwrap();
    let opts = crate::synth::BuildOptions {
        size: (16, 16),
        ..crate::synth::BuildOptions::default()
    };
    let m = crate::synth::build_dataset_from_images(&imgs, dir.path(), 2, &opts).unwrap();
    let (train, val) = split_training_set(&m, 0.1, Execution::Parallel).unwrap();
    // 6 training sources: one held out
    assert_eq!(train.len(), 15);
    assert_eq!(val.len(), 3);
    let (train, val) = split_training_set(&m, 0.0, Execution::Parallel).unwrap();
    assert_eq!((train.len(), val.len()), (18, 0));
}
