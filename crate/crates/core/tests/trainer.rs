use sgmm::classifier::HeadConfig;
use sgmm::data::{gen_classification, Dataset, SynthConfig};
use sgmm::deep_pool::{init_from_ubm, CodeKind, PoolSpec, Variant};
use sgmm::gmm::{train_ubm, CovarianceKind, EmConfig};
use sgmm::params::Params;
use sgmm::rng;
use sgmm::trainer::{self, Model, Pooling, TrainConfig};
use sgmm::Matrix;

fn two_class_data() -> (Dataset, Dataset) {
    let cfg = SynthConfig {
        num_classes: 2,
        num_clusters_true: 4,
        dim: 4,
        videos_per_class: 40,
        seed: 21,
        ..SynthConfig::default()
    };
    gen_classification(&cfg).unwrap().split_tail(0.25)
}

fn dsgmm_model(train: &Dataset, classes: usize) -> Model {
    let ubm =
        train_ubm(&train.stacked_frames(), 4, CovarianceKind::Diagonal, &EmConfig { seed: 2, ..EmConfig::default() })
            .unwrap()
            .model;
    let layer = init_from_ubm(&ubm, Variant::Diagonal, PoolSpec::new(CodeKind::Dsgmm)).unwrap();
    Model::new(Pooling::Trainable(layer), classes, HeadConfig::default(), &mut rng::seeded(8)).unwrap()
}

#[test]
fn smoke_training_drives_loss_down() {
    let (train, val) = two_class_data();
    let model = dsgmm_model(&train, 2);
    let initial = trainer::evaluate(&model, &train).unwrap().loss;
    let cfg =
        TrainConfig { lr: 0.01, max_steps: 500, eval_every: 100, batch_size: 16, seed: 4, ..TrainConfig::default() };
    let out = trainer::train(&train, &val, model, &cfg).unwrap();
    let fin = trainer::evaluate(&out.last.model, &train).unwrap().loss;
    assert!(fin < 0.1 * initial, "loss {initial} -> {fin}");
    assert_eq!(out.log.len(), 5);
    assert!(out.log.iter().any(|r| r.val_loss == out.best.val_loss));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (train, val) = two_class_data();
    let model = dsgmm_model(&train, 2);
    let cfg = TrainConfig { lr: 0.0, max_steps: 5, eval_every: 5, batch_size: 4, seed: 1, ..TrainConfig::default() };
    let out = trainer::train(&train, &val, model.clone(), &cfg).unwrap();
    assert_eq!(out.last.model.flatten(), model.flatten());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (train, val) = two_class_data();
    let model = dsgmm_model(&train, 2);
    let full_cfg =
        TrainConfig { lr: 0.005, max_steps: 40, eval_every: 10, batch_size: 8, seed: 6, ..TrainConfig::default() };
    let full = trainer::train(&train, &val, model.clone(), &full_cfg).unwrap();

    let half_cfg = TrainConfig { max_steps: 20, ..full_cfg.clone() };
    let half = trainer::train(&train, &val, model, &half_cfg).unwrap();
    let bytes = trainer::encode_checkpoint(&half.last).unwrap();
    let restored = trainer::decode_checkpoint(&bytes).unwrap();
    let resumed = trainer::resume(&train, &val, restored, Some(half.best), half.log, &full_cfg).unwrap();

    assert_eq!(trainer::encode_checkpoint(&resumed.last).unwrap(), trainer::encode_checkpoint(&full.last).unwrap());
    assert_eq!(trainer::log_csv(&resumed.log), trainer::log_csv(&full.log));
}

#[test]
fn resume_rejects_a_different_seed() {
    let (train, val) = two_class_data();
    let cfg = TrainConfig { max_steps: 2, eval_every: 2, batch_size: 2, seed: 1, ..TrainConfig::default() };
    let out = trainer::train(&train, &val, dsgmm_model(&train, 2), &cfg).unwrap();
    let other = TrainConfig { seed: 2, max_steps: 4, ..cfg };
    assert!(trainer::resume(&train, &val, out.last, None, out.log, &other).is_err());
}

#[test]
fn checkpoint_files_round_trip() {
    let (train, val) = two_class_data();
    let cfg = TrainConfig { max_steps: 3, eval_every: 3, batch_size: 2, seed: 3, ..TrainConfig::default() };
    let out = trainer::train(&train, &val, dsgmm_model(&train, 2), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    trainer::write_checkpoint(&out.best, &path).unwrap();
    assert_eq!(trainer::read_checkpoint(&path).unwrap(), out.best);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(trainer::decode_checkpoint(&bytes).is_err());
    assert!(trainer::decode_checkpoint(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn frame_sampling_is_uniform_with_replacement() {
    let t = 5;
    let frames = Matrix::from_vec(t, 1, (0..t).map(|i| i as f64).collect()).unwrap();
    let draws = 20_000;
    let s = trainer::sample_frames_seeded(&frames, draws, 17);
    let mut counts = vec![0usize; t];
    for v in s.as_slice() {
        counts[*v as usize] += 1;
    }
    let p = 1.0 / t as f64;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() < 4.0 * sd, "count {c}");
    }
    // more samples than frames is allowed
    assert_eq!(trainer::sample_frames_seeded(&frames, 12, 1).rows(), 12);
}

#[test]
fn average_and_frozen_pooling_train() {
    let (train, val) = two_class_data();
    let cfg = TrainConfig { lr: 0.01, max_steps: 30, eval_every: 30, batch_size: 8, seed: 2, ..TrainConfig::default() };
    let model = Model::new(Pooling::Average { dim: 4 }, 2, HeadConfig::default(), &mut rng::seeded(1)).unwrap();
    let out = trainer::train(&train, &val, model, &cfg).unwrap();
    assert!(out.best.val_loss.is_finite());
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, val) = two_class_data();
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { eval_every: 0, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { frames_per_video: 0, ..TrainConfig::default() },
    ] {
        assert!(trainer::train(&train, &val, dsgmm_model(&train, 2), &cfg).is_err());
    }
}
