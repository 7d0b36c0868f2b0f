use mistlab::data::{gen_synthetic, LabeledDataset, SyntheticSpec};
use mistlab::train::{
    baseline_train, mist_train, xdiff_loss_and_grad, MistConfig, TrainLog, XdiffVariant,
};

fn data(seed: u64) -> LabeledDataset {
    gen_synthetic(&SyntheticSpec {
        classes: 4,
        dim: 6,
        per_class: 30,
        cluster_spread: 1.5,
        center_scale: 1.0,
        seed,
    })
    .unwrap()
}

const DIMS: [usize; 3] = [6, 12, 4];

fn bits(log: &TrainLog) -> Vec<u64> {
    log.model.values().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn single_submodel_without_penalty_is_baseline_sgd() {
    let d = data(1);
    for mixup in [None, Some(0.4)] {
        let cfg = MistConfig {
            submodels: 1,
            lambda: 0.0,
            epochs: 6,
            batch_size: 16,
            lr_decay_epochs: vec![4],
            mixup_alpha: mixup,
            seed: 42,
            ..MistConfig::default()
        };
        let a = mist_train(&d, None, &DIMS, &cfg).unwrap();
        let b = baseline_train(&d, None, &DIMS, &cfg).unwrap();
        assert_eq!(bits(&a), bits(&b), "mixup {mixup:?}");
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.ce_loss.to_bits(), y.ce_loss.to_bits());
            assert_eq!(x.train_acc, y.train_acc);
        }
    }
}

#[test]
fn parallel_and_serial_training_agree_bitwise() {
    let d = data(2);
    for variant in XdiffVariant::ALL {
        let cfg = MistConfig {
            submodels: 3,
            lambda: 2.0,
            variant,
            epochs: 4,
            batch_size: 8,
            mixup_alpha: Some(1.0),
            seed: 7,
            ..MistConfig::default()
        };
        let serial = mist_train(&d, None, &DIMS, &cfg).unwrap();
        let parallel = mist_train(&d, None, &DIMS, &MistConfig { parallel: true, ..cfg.clone() }).unwrap();
        assert_eq!(bits(&serial), bits(&parallel), "{variant}");
        assert_eq!(serial.epochs, parallel.epochs);
    }
}

#[test]
fn same_seed_same_model_different_seed_different_model() {
    let d = data(3);
    let cfg = MistConfig { submodels: 2, lambda: 1.0, epochs: 3, batch_size: 10, seed: 1, ..MistConfig::default() };
    let a = mist_train(&d, None, &DIMS, &cfg).unwrap();
    let b = mist_train(&d, None, &DIMS, &cfg).unwrap();
    let c = mist_train(&d, None, &DIMS, &MistConfig { seed: 2, ..cfg }).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn frozen_peers_are_untouched() {
    let d = data(4);
    let peers: Vec<_> = (0..3)
        .map(|s| mistlab::train::init_model(&DIMS, s).unwrap())
        .collect();
    let before: Vec<u64> = peers.iter().map(|p| p.checksum()).collect();
    let w = mistlab::train::init_model(&DIMS, 99).unwrap();
    for v in XdiffVariant::ALL {
        xdiff_loss_and_grad(&w, &d.as_batch(), &peers, v).unwrap();
    }
    let after: Vec<u64> = peers.iter().map(|p| p.checksum()).collect();
    assert_eq!(before, after);
}

/// Final-epoch cross difference for each λ on the grid.
fn final_xdiff(seed: u64, lambdas: &[f64]) -> Vec<f64> {
    let d = data(10 + seed);
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = MistConfig {
                submodels: 3,
                lambda,
                variant: XdiffVariant::L2,
                epochs: 8,
                batch_size: 10,
                phase2_lr: Some(0.05),
                seed,
                ..MistConfig::default()
            };
            let log = mist_train(&d, None, &DIMS, &cfg).unwrap();
            log.epochs.last().unwrap().xdiff_loss.unwrap()
        })
        .collect()
}

#[test]
fn larger_lambda_shrinks_cross_difference() {
    let grid = [0.0, 2.0, 8.0];
    let monotone = (0..3)
        .filter(|&s| {
            let x = final_xdiff(s, &grid);
            x.windows(2).all(|w| w[1] < w[0])
        })
        .count();
    assert!(monotone >= 2, "monotone in {monotone} of 3 seeds");
}
