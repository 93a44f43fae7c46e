use brainalign::encoder::PERCEIVER_PREFIX;
use brainalign::*;
use proptest::prelude::*;
use rand::Rng;

fn config(depth: usize) -> EncoderConfig {
    EncoderConfig {
        token_count: 4,
        token_dim: 8,
        subject_token_count: 2,
        latent_query_count: 3,
        encoder_depth: depth,
        attention_heads: 2,
        output_channels: 5,
        ff_multiplier: 2,
    }
}

fn specs(dims: &[usize]) -> Vec<SubjectSpec> {
    dims.iter()
        .enumerate()
        .map(|(i, &d)| SubjectSpec::new(format!("S{}", i + 1), d))
        .collect()
}

fn voxels(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

fn bits(g: &FeatureGrid) -> Vec<u32> {
    g.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn perturbing_the_perceiver_changes_every_subject() {
    let specs = specs(&[7, 19, 33]);
    let mut rng = new_rng(1);
    let state = init_encoder(&config(1), &specs, &mut rng).unwrap();
    let mut moved = state.clone();
    moved.walk_mut(&mut |name: &str, x: &mut [f32]| {
        if name.starts_with(PERCEIVER_PREFIX) {
            x.iter_mut().for_each(|v| *v += 0.05);
        }
    });
    for spec in &specs {
        let x = voxels(&mut rng, spec.voxel_dim);
        let a = state.forward(&spec.subject_id, &x).unwrap();
        let b = moved.forward(&spec.subject_id, &x).unwrap();
        assert_ne!(
            bits(&a),
            bits(&b),
            "{} did not see the perceiver change",
            spec.subject_id
        );
    }
}

#[test]
fn perceiver_size_does_not_depend_on_subject_count() {
    let perceiver_params = |k: usize| {
        let dims: Vec<usize> = (0..k).map(|i| 10 + i).collect();
        let state = init_encoder(&config(2), &specs(&dims), &mut new_rng(2)).unwrap();
        let mut n = 0;
        state.walk(&mut |name: &str, _: &[usize], x: &[f32]| {
            if name.starts_with(PERCEIVER_PREFIX) {
                n += x.len();
            }
        });
        n
    };
    assert_eq!(perceiver_params(1), perceiver_params(5));
}

#[test]
fn unknown_subject_and_wrong_length_are_errors() {
    let state = init_encoder(&config(0), &specs(&[6]), &mut new_rng(3)).unwrap();
    assert!(matches!(state.forward("S9", &[0.0; 6]), Err(Error::UnknownSubject(_))));
    assert!(matches!(
        state.forward("S1", &[0.0; 5]),
        Err(Error::VoxelLength {
            expected: 6,
            got: 5,
            ..
        })
    ));
}

#[test]
fn gradient_check_on_float64_state() {
    let specs = specs(&[5, 8]);
    let mut rng = new_rng(4);
    let state = EncoderState::<f64>::init(&config(1), &specs, &mut rng).unwrap();
    let target = FeatureGrid::new(ndarray::Array2::from_elem((3, 5), 0.25)).unwrap();
    let sample = BrainSample::new("S2", voxels(&mut rng, 8)).with_target(target);
    let err = brainalign::encoder::gradient_check(&state, &sample, 1e-5, 100, &mut rng).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_is_fixed(dims in prop::collection::vec(1usize..40, 1..5), seed in any::<u64>(), depth in 0usize..3) {
        let specs = specs(&dims);
        let mut rng = new_rng(seed);
        let state = init_encoder(&config(depth), &specs, &mut rng).unwrap();
        for spec in &specs {
            let grid = state.forward(&spec.subject_id, &voxels(&mut rng, spec.voxel_dim)).unwrap();
            prop_assert_eq!(grid.shape(), (3, 5));
            prop_assert!(grid.is_finite());
        }
    }

    #[test]
    fn other_tokenizers_do_not_leak(dims in prop::collection::vec(1usize..30, 2..5), seed in any::<u64>(), shift in -1.0f32..1.0) {
        let specs = specs(&dims);
        let mut rng = new_rng(seed);
        let state = init_encoder(&config(1), &specs, &mut rng).unwrap();
        let target = &specs[0];
        let x = voxels(&mut rng, target.voxel_dim);
        let before = state.forward(&target.subject_id, &x).unwrap();
        let mut moved = state.clone();
        let own = format!("tokenizers.{}.", target.subject_id);
        moved.walk_mut(&mut |name: &str, p: &mut [f32]| {
            if !name.starts_with(PERCEIVER_PREFIX) && !name.starts_with(&own) {
                p.iter_mut().for_each(|v| *v = *v * 2.0 + shift);
            }
        });
        prop_assert_eq!(bits(&before), bits(&moved.forward(&target.subject_id, &x).unwrap()));
    }

    #[test]
    fn init_and_forward_are_seed_deterministic(seed in any::<u64>()) {
        let specs = specs(&[9, 4]);
        let a = init_encoder(&config(1), &specs, &mut new_rng(seed)).unwrap();
        let b = init_encoder(&config(1), &specs, &mut new_rng(seed)).unwrap();
        let x = voxels(&mut new_rng(seed ^ 1), 9);
        prop_assert_eq!(bits(&a.forward("S1", &x).unwrap()), bits(&b.forward("S1", &x).unwrap()));
    }
}
