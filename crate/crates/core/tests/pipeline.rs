use desmoke::asm::{compose_unclamped, kb_from_t, reconstruct_unclamped, smoke_mask_from_t, AtmosphericLight, ReconstructionBias, TransmissionMap};
use desmoke::image::{ImageRgb, Plane};
use desmoke::metrics::{dcp_desmoke, evaluate, DcpConfig};
use desmoke::model::{Ablation, Ablations, ModelConfig};
use desmoke::parallel::Execution;
use desmoke::synth::{build_dataset_from_images, generate_texture_corpus, load_manifest, BuildOptions, Split};
use desmoke::train::{train, Checkpoint, TrainConfig, METRICS_FILE};
use proptest::prelude::*;

fn tiny_dataset(dir: &std::path::Path) -> desmoke::synth::DatasetManifest {
    let imgs = generate_texture_corpus(6, 4, (16, 16)).unwrap();
    let opts = BuildOptions {
        size: (16, 16),
        test_fraction: 1.0 / 3.0,
        ..BuildOptions::default()
    };
    build_dataset_from_images(&imgs, dir, 8, &opts).unwrap();
    load_manifest(dir).unwrap()
}

#[test]
fn dataset_train_checkpoint_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&tmp.path().join("data"));
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (12, 6));
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        ablations: Ablations::only(Ablation::NoSpe),
        ..TrainConfig::default()
    };
    let run = tmp.path().join("run");
    let out = train(&m, &cfg, ModelConfig::tiny(), &run).unwrap();
    assert_eq!(std::fs::read_to_string(run.join(METRICS_FILE)).unwrap().lines().count(), 2);
    let ck = Checkpoint::load(&run.join("last")).unwrap();
    assert_eq!(ck.meta.model.ablations, cfg.ablations);
    assert_eq!(ck.meta.model.image_size, (16, 16));
    let model = ck.model().unwrap();
    assert_eq!(model.params(), out.model.params());

    let test = m.load_split(Split::Test, Execution::Parallel).unwrap();
    let r = evaluate(&test, &ck.id(), Execution::Parallel, |s| Ok(model.forward(&s.smoke)?.desmoked));
    assert_eq!(r.rows.len(), 6);
    assert!(r.failures.is_empty());
    assert!(r.aggregate.psnr_out.is_finite());
}

#[test]
fn dcp_improves_heavy_uniform_haze() {
    let clean = &generate_texture_corpus(1, 2, (32, 32)).unwrap()[0];
    let t = TransmissionMap::uniform(32, 32, 0.5).unwrap();
    let hazy = compose_unclamped(clean, &t, AtmosphericLight::WHITE).unwrap();
    let out = dcp_desmoke(&hazy, &DcpConfig::default()).unwrap();
    let err = |a: &ImageRgb| a.data().iter().zip(clean.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
    assert!(err(&out.image) < err(&hazy));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scattering_model_round_trips(
        px in prop::collection::vec(0.0f64..=1.0, 12),
        ts in prop::collection::vec(0.01f64..=1.0, 4),
        a in prop::array::uniform3(0.05f64..=1.0),
    ) {
        let j = ImageRgb::new(2, 2, px).unwrap();
        let t = TransmissionMap::new(Plane::new(2, 2, ts).unwrap()).unwrap();
        let a = AtmosphericLight::new(a).unwrap();
        let i = compose_unclamped(&j, &t, a).unwrap();
        let back = reconstruct_unclamped(&i, &kb_from_t(&t).unwrap(), &smoke_mask_from_t(&t, a), ReconstructionBias::ZERO).unwrap();
        for (x, y) in back.data().iter().zip(j.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
