use brainalign::eval::{retrieval_embeddings, retrieval_forward};
use brainalign::sampler::SamplingStrategy;
use brainalign::synthworld::*;
use brainalign::trainer::LossConfig;
use brainalign::*;

#[test]
fn noiseless_ceiling_is_exactly_one() {
    let world = WorldSpec {
        voxel_dims: vec![20, 24, 40],
        grid_shape: (2, 4),
        gallery_size: 50,
        noise: 0.0,
        seed: 2,
    }
    .build()
    .unwrap();
    assert_eq!(oracle_ceiling(&world, 50, &mut new_rng(3)).unwrap(), 1.0);
}

#[test]
fn noise_lowers_the_ceiling() {
    let spec = |noise| WorldSpec {
        voxel_dims: vec![16],
        grid_shape: (2, 4),
        gallery_size: 200,
        noise,
        seed: 4,
    };
    let clean = oracle_ceiling(&spec(0.0).build().unwrap(), 100, &mut new_rng(5)).unwrap();
    let noisy = oracle_ceiling(&spec(3.0).build().unwrap(), 100, &mut new_rng(5)).unwrap();
    assert!(noisy < clean, "{noisy} vs {clean}");
}

#[test]
fn trained_encoder_sits_between_chance_and_ceiling() {
    let world = WorldSpec {
        voxel_dims: vec![24, 32],
        grid_shape: (2, 8),
        gallery_size: 240,
        noise: 0.2,
        seed: 6,
    }
    .build()
    .unwrap();
    let ds = world.split_dataset(60, &mut new_rng(7)).unwrap();
    let cfg = EncoderConfig::desk(2, 8);
    let state = init_encoder(&cfg, &ds.specs, &mut new_rng(8)).unwrap();
    let tc = TrainConfig {
        batch_size: 32,
        epochs: 15,
        lr_max: 1e-3,
        loss: LossKind::NceEncoder,
        seed: 9,
        ..TrainConfig::default()
    };
    let (ckpt, _) = train_align(state, &ds.train, &tc, &LossConfig::nce(), SamplingStrategy::Ours).unwrap();
    let ceiling = oracle_ceiling(&world, 60, &mut new_rng(10)).unwrap();
    for spec in &ds.specs {
        let rows: Vec<BrainSample> = ds
            .test
            .iter()
            .filter(|s| s.subject_id == spec.subject_id)
            .cloned()
            .collect();
        let (brain, image) = retrieval_embeddings(&ckpt.state, &rows).unwrap();
        let acc = retrieval_forward(brain.view(), image.view(), 60, 10, &mut new_rng(11)).unwrap();
        assert!(acc > 3.0 / 60.0, "{}: {acc} is not above chance", spec.subject_id);
        assert!(
            acc <= ceiling + 0.05,
            "{}: {acc} above ceiling {ceiling}",
            spec.subject_id
        );
    }
}

#[test]
fn spec_file_round_trip_rebuilds_the_same_world() {
    let dir = tempfile::tempdir().unwrap();
    let spec = WorldSpec {
        voxel_dims: vec![8, 12],
        grid_shape: (2, 2),
        gallery_size: 10,
        noise: 0.1,
        seed: 12,
    };
    let path = dir.path().join("world.json");
    spec.save(&path).unwrap();
    let back = WorldSpec::load(&path).unwrap();
    assert_eq!(back, spec);
    let (a, b) = (spec.build().unwrap(), back.build().unwrap());
    assert_eq!(a.gallery, b.gallery);
    let mut r1 = new_rng(1);
    let mut r2 = new_rng(1);
    assert_eq!(
        a.render("S2", &[3, 4], &mut r1).unwrap(),
        b.render("S2", &[3, 4], &mut r2).unwrap()
    );
}
