use brainalign::datahub::*;
use brainalign::sampler::SamplingStrategy;
use brainalign::synthworld::WorldSpec;
use brainalign::trainer::LossConfig;
use brainalign::*;

fn small_world() -> brainalign::synthworld::SyntheticWorld {
    WorldSpec {
        voxel_dims: vec![10, 14],
        grid_shape: (2, 3),
        gallery_size: 30,
        noise: 0.05,
        seed: 3,
    }
    .build()
    .unwrap()
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        token_count: 3,
        token_dim: 8,
        subject_token_count: 1,
        latent_query_count: 2,
        encoder_depth: 1,
        attention_heads: 2,
        output_channels: 3,
        ff_multiplier: 2,
    }
}

#[test]
fn dataset_round_trips_through_disk_and_trains() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_world().split_dataset(8, &mut new_rng(1)).unwrap();
    let manifest = save_dataset(dir.path(), &ds).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded, ds);

    let state = init_encoder(&tiny_config(), &loaded.specs, &mut new_rng(2)).unwrap();
    let tc = TrainConfig {
        batch_size: 8,
        epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let (ckpt, log) = train_align(state, &loaded.train, &tc, &LossConfig::mse(), SamplingStrategy::Ours).unwrap();
    assert_eq!(log.epochs.len(), 2);

    let ckpt_dir = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &ckpt_dir).unwrap();
    let back = load_checkpoint(&ckpt_dir).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(perceiver_hash(&back.state), perceiver_hash(&ckpt.state));
}

#[test]
fn exported_features_are_little_endian_f32_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let state = init_encoder(&tiny_config(), &[SubjectSpec::new("S1", 10)], &mut new_rng(5)).unwrap();
    let grids: Vec<FeatureGrid> = (0..4)
        .map(|i| state.forward("S1", &[i as f32 * 0.1; 10]).unwrap())
        .collect();
    let path = dir.path().join("features.bin");
    let header = export_features(&grids, &path).unwrap();
    assert_eq!((header.count, header.tokens, header.channels), (4, 2, 3));
    assert!(sidecar_path(&path).exists());

    let bytes = std::fs::read(&path).unwrap();
    let (shape, values) = decode_tensor(&bytes).unwrap();
    assert_eq!(shape, vec![4, 2, 3]);
    let first = f32::from_le_bytes(bytes[bytes.len() - 24 * 4..][..4].try_into().unwrap());
    assert_eq!(first.to_bits(), grids[0].as_slice()[0].to_bits());
    assert_eq!(values.len(), 24);

    let (again, back) = import_features(&path).unwrap();
    assert_eq!(again, header);
    assert_eq!(back, grids);
}

#[test]
fn manifest_with_wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_world().split_dataset(8, &mut new_rng(1)).unwrap();
    let manifest = save_dataset(dir.path(), &ds).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    let bumped = text.replacen(
        &format!("\"format_version\": {DATASET_VERSION}"),
        "\"format_version\": 99",
        1,
    );
    assert_ne!(text, bumped);
    std::fs::write(&manifest, bumped).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Version { found: 99, .. })));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(&dir.path().join("nope.json")), Err(Error::Io(_))));
}
