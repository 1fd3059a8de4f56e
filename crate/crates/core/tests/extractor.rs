mod common;

use fpcil_core::extractor::{
    finalize_initial_step, init_extractor, loss_and_grads, train_initial, LinearHeadWeights, TrainConfig,
};
use fpcil_core::rng::SplitMix64;
use fpcil_core::world::{GapParams, World, WorldConfig};
use fpcil_core::{ClassId, EmbeddingSample, Error, Origin, Split};

#[test]
fn analytic_gradients_match_central_differences() {
    let check = common::gradient_check(100, 7);
    assert_eq!(check.instances, 100);
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

#[test]
fn weight_decay_adds_exactly_lambda_w() {
    let mut rng = SplitMix64::new(3);
    let extractor = init_extractor(&[4, 6, 5], 11).unwrap();
    let ids: Vec<ClassId> = vec![0, 1, 2];
    let head = LinearHeadWeights::init(&ids, 5, 12).unwrap();
    let batch: Vec<EmbeddingSample> = (0..6)
        .map(|i| EmbeddingSample::new(common::normal_vec(&mut rng, 4, 1.0), i % 3, Origin::Real, Split::Train))
        .collect();
    let lambda = 0.037;
    let (_, plain) = loss_and_grads(&extractor, &head, &batch, 0.0).unwrap();
    let (_, decayed) = loss_and_grads(&extractor, &head, &batch, lambda).unwrap();
    for (i, layer) in extractor.layers().iter().enumerate() {
        let diff = &decayed.layers[i].weights - &plain.layers[i].weights;
        let expected = lambda * &layer.weights;
        assert!((diff - expected).amax() < 1e-15);
        assert_eq!(decayed.layers[i].bias, plain.layers[i].bias);
    }
    let diff = &decayed.head.matrix - &plain.head.matrix;
    assert!((diff - lambda * &head.matrix).amax() < 1e-15);
    assert_eq!(decayed.head.bias, plain.head.bias);
}

#[test]
fn training_loss_falls_on_a_separable_world() {
    let mut falling = 0;
    for seed in 0..20u64 {
        let world = World::new(WorldConfig {
            num_classes: 4,
            dim: 6,
            separation: 8.0,
            intra_sd: 0.5,
            seed,
            num_distractors: 0,
            anisotropy: 0.0,
        })
        .unwrap();
        let mut data = Vec::new();
        for c in 0..4 {
            data.extend(world.sample(c, 30, Origin::Real, Split::Train, GapParams::NONE, 1).unwrap());
        }
        let mut extractor = init_extractor(&[6, 12, 8], seed).unwrap();
        let mut head = LinearHeadWeights::init(&[0, 1, 2, 3], 8, seed + 100).unwrap();
        let config = TrainConfig {
            epochs: 50,
            batch_size: 16,
            shuffle_seed: seed,
            ..TrainConfig::default()
        };
        let log = train_initial(&mut extractor, &mut head, &data, &config).unwrap();
        assert_eq!(log.epoch_losses.len(), 50);
        if log.epoch_losses[49] < log.epoch_losses[0] {
            falling += 1;
        }
    }
    assert!(falling >= 19, "{falling} of 20 seeds");
}

#[test]
fn freezing_is_permanent() {
    let mut extractor = init_extractor(&[3, 4, 2], 1).unwrap();
    let head = LinearHeadWeights::init(&[0, 1, 2], 2, 2).unwrap();
    let before = extractor.digest();
    let restricted = finalize_initial_step(&mut extractor, &head, &[0, 2]).unwrap();
    assert_eq!(restricted.class_ids, vec![0, 2]);
    assert!(extractor.is_frozen());
    assert!(matches!(extractor.layers_mut(), Err(Error::Protocol(_))));
    let mut head = head;
    let data = vec![EmbeddingSample::new(vec![1.0, 0.0, 0.0], 0, Origin::Real, Split::Train)];
    let err = train_initial(&mut extractor, &mut head, &data, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(extractor.digest(), before);
}
