use cfx_core::attacks::{fgsm, icm_attack, pgd, AttackConfig};
use cfx_core::detectors::{
    accuracy, cozz_counts, cozznet_from_spam, train_bayar_logged, train_spam_linear, BayarArch, CozzMode,
    DetectorModel, LinearHyper, NetHyper, TrainSet, DEFAULT_SOFT_TEMPERATURE,
};
use cfx_core::imaging::{generate_dataset, mse, DatasetSpec};
use cfx_core::manipulations::{apply, ManipulationSpec};
use cfx_core::spamfeat::{feature_counts, histograms, Normalization, SpamConfig};

fn sets(task: ManipulationSpec) -> (TrainSet, TrainSet) {
    let spec = DatasetSpec { images_per_device: 3, patch_size: 32, patches_per_image: 4, patch_stride: 32, seed: 4, ..Default::default() };
    let mut train = TrainSet::default();
    let mut test = TrainSet::default();
    for p in generate_dataset(&spec).unwrap() {
        let side = if p.device_id < 6 { &mut train } else { &mut test };
        let m = apply(&p.patch, &task).unwrap();
        side.push(p.patch, 0, p.device_id);
        side.push(m, 1, p.device_id);
    }
    (train, test)
}

#[test]
fn spam_detector_learns_blur_and_survives_serialization() {
    let (train, test) = sets(ManipulationSpec::Blur { sigma: 1.1 });
    let model = train_spam_linear(&train, &SpamConfig::default(), &LinearHyper::default()).unwrap();
    assert!(accuracy(&model, &test.patches, &test.labels).unwrap() > 0.9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cfxm");
    model.save(&path).unwrap();
    let back = DetectorModel::load(&path).unwrap();
    assert_eq!(back.to_bytes(), model.to_bytes());
    for p in &test.patches[..6] {
        assert_eq!(back.score(p).unwrap(), model.score(p).unwrap());
    }
}

#[test]
fn hard_network_counts_equal_direct_counts() {
    let (train, test) = sets(ManipulationSpec::Median { kernel: 5 });
    let cfg = SpamConfig { normalization: Normalization::L1, ..Default::default() };
    let spam = train_spam_linear(&train, &cfg, &LinearHyper::default()).unwrap();
    let hard = cozznet_from_spam(&spam, CozzMode::Hard, DEFAULT_SOFT_TEMPERATURE).unwrap();
    for p in test.patches.iter().take(8) {
        let direct = histograms(p, &cfg).unwrap();
        let raw = feature_counts(&direct, &SpamConfig { symmetrize: false, ..cfg.clone() }, None);
        assert_eq!(cozz_counts(&hard, p).unwrap(), raw);
        assert!((hard.score(p).unwrap() - spam.score(p).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn attacks_against_trained_detectors() {
    let (train, test) = sets(ManipulationSpec::Blur { sigma: 1.1 });
    let hyper = NetHyper { epochs: 2, lr: 0.005, grad_clip: 0.5, seed: 3, ..Default::default() };
    let (bayar, log) = train_bayar_logged(&train, &BayarArch::default(), &hyper).unwrap();
    assert!(log.constraint_ok.iter().all(|&ok| ok));
    assert!(log.epoch_loss.iter().all(|l| l.is_finite()));

    let x0 = &test.patches[1];
    let f = fgsm(&bayar, x0, 1).unwrap();
    let p = pgd(&bayar, x0, &AttackConfig { epsilon: 1, pgd_steps: 1, pgd_alpha: 1, ..Default::default() }).unwrap();
    assert_eq!(f, p);
    assert!(f.psnr_db.db() >= 48.13 - 1e-9);
    assert!(f.adversarial.pixels().iter().zip(x0.pixels()).all(|(a, b)| a.abs_diff(*b) <= 1));

    let spam = train_spam_linear(&train, &SpamConfig::default(), &LinearHyper::default()).unwrap();
    let cfg = AttackConfig { max_sweeps: 3, ..Default::default() };
    let r = icm_attack(&spam, x0, None, &cfg).unwrap();
    assert!(mse(x0, &r.adversarial).unwrap() <= cfg.distortion_t);
    assert!(r.objective_trace.windows(2).all(|w| w[1] < w[0]));
}
