mod common;

use proptest::prelude::*;
use rand::Rng;

use common::{canny_reference, matches_ring, rel_err, white_square};
use sttl_core::network::{
    assemble_input, build_graph, init_hidden_random, init_parameters, HeadKind, HiddenState, ImageSequence, Label,
    NetworkConfig, ParamVars, Parameters,
};
use sttl_core::salient::{attribute, canny, generate_salient_subset, subset_indices, CannyConfig, MapModel};
use sttl_core::synthdata::{generate_dataset, town_a, Dataset};
use sttl_core::tensor::{Tape, Tensor};

fn small_net() -> NetworkConfig {
    NetworkConfig::toy(16, 16, 3)
}

fn small_data(n: usize, seed: u64) -> Dataset {
    Dataset::new(generate_dataset(&town_a().with_size(16, 16), n, 0.5, 3, seed).unwrap())
}

fn model_with_biases(seed: u64) -> MapModel {
    let cfg = small_net();
    let mut p = init_parameters(&cfg, seed).unwrap();
    let mut r = common::rng(seed);
    for (name, t) in p.tensors.iter_mut() {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.1..0.1));
        }
    }
    MapModel::new(p, init_hidden_random(&cfg, seed).unwrap()).unwrap()
}

fn class_score(params: &Parameters, h0: &HiddenState, input: &Tensor, class: Label) -> f64 {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, false);
    let x = tape.constant(input.clone());
    let g = build_graph(&mut tape, &params.config, &pv, x, 1, h0).unwrap();
    tape.value(g.logits).row(0)[class.index()]
}

/// 12x12 fixture: a horizontal edge under a strip whose left half is bright
/// (strong) and right half dim (weak, but connected), a bright block that
/// sets the maximum, and an isolated dim block.
fn hysteresis_fixture(connected_strong: bool) -> Vec<f64> {
    let left = if connected_strong { 0.45 } else { 0.25 };
    (0..144)
        .map(|i| {
            let (y, x) = (i / 12, i % 12);
            if y < 5 {
                if x < 6 {
                    left
                } else {
                    0.25
                }
            } else if y >= 9 && x < 3 {
                1.0
            } else if y >= 9 && x >= 8 {
                0.25
            } else {
                0.0
            }
        })
        .collect()
}

#[test]
fn square_fixture_gives_the_boundary_ring() {
    let cfg = CannyConfig::default();
    let img = white_square();
    let edges = canny(&img, 20, 20, &cfg).unwrap();
    assert_eq!(edges, canny_reference(&img, 20, 20, &cfg));
    assert!(matches_ring(&edges));
}

#[test]
fn weak_edges_survive_only_when_linked() {
    let cfg = CannyConfig::default();
    let img = hysteresis_fixture(true);
    let edges = canny(&img, 12, 12, &cfg).unwrap();
    assert_eq!(edges, canny_reference(&img, 12, 12, &cfg));
    // The dim half of the strip edge survives through its strong half.
    assert!((0..12).all(|x| edges[4 * 12 + x] == 1));
    // The isolated dim block leaves nothing.
    assert!((8..12).all(|y| (6..12).all(|x| edges[y * 12 + x] == 0)));

    // Both dim edges are weak, not absent: without the strong half the strip
    // edge disappears, and a lower high threshold promotes the block edges.
    let alone = canny(&hysteresis_fixture(false), 12, 12, &cfg).unwrap();
    assert!((6..12).all(|x| alone[4 * 12 + x] == 0));
    let promoted = canny(
        &img,
        12,
        12,
        &CannyConfig {
            high_threshold: 0.15,
            ..cfg
        },
    )
    .unwrap();
    assert!((8..12).any(|y| (6..12).any(|x| promoted[y * 12 + x] == 1)));
}

#[test]
fn constant_frames_and_bad_configs() {
    for v in [0.0, 0.3, 1.0] {
        assert!(canny(&[v; 64], 8, 8, &CannyConfig::default())
            .unwrap()
            .iter()
            .all(|&e| e == 0));
    }
    let bad = [
        CannyConfig {
            kernel: 4,
            ..Default::default()
        },
        CannyConfig {
            low_threshold: 0.5,
            high_threshold: 0.4,
            ..Default::default()
        },
        CannyConfig {
            high_threshold: 1.5,
            ..Default::default()
        },
        CannyConfig {
            gaussian_sigma: 0.0,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(canny(&[0.0; 64], 8, 8, &cfg).is_err());
    }
    assert!(canny(&[0.0; 63], 8, 8, &CannyConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canny_agrees_with_reference(seed in any::<u64>(), h in 6usize..20, w in 6usize..20) {
        let mut r = common::rng(seed);
        let img: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
        let cfg = CannyConfig::default();
        prop_assert_eq!(canny(&img, h, w, &cfg).unwrap(), canny_reference(&img, h, w, &cfg));
    }

    #[test]
    fn canny_ignores_global_brightness(seed in any::<u64>(), k in 0.01f64..=1.0) {
        let mut r = common::rng(seed);
        let img: Vec<f64> = (0..256).map(|_| r.random::<f64>()).collect();
        let scaled: Vec<f64> = img.iter().map(|v| v * k).collect();
        let cfg = CannyConfig::default();
        prop_assert_eq!(canny(&img, 16, 16, &cfg).unwrap(), canny(&scaled, 16, 16, &cfg).unwrap());
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let model = model_with_biases(3);
    let data = small_data(4, 11);
    let seq = &data.sequences[1];
    let a = attribute(&model, seq, Some(Label::Collision)).unwrap();
    let mut input = assemble_input(&model.params.config, &[seq], &[None]).unwrap();
    let mut r = common::rng(5);
    let h = 1e-6;
    for _ in 0..10 {
        let i = r.random_range(0..input.numel());
        let orig = input.data()[i];
        input.data_mut()[i] = orig + h;
        let up = class_score(&model.params, &model.hidden, &input, Label::Collision);
        input.data_mut()[i] = orig - h;
        let down = class_score(&model.params, &model.hidden, &input, Label::Collision);
        input.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(a.input_grad.data()[i], numeric, 1e-6);
        assert!(
            e < 1e-3,
            "pixel {i}: analytic {} numeric {numeric} rel {e}",
            a.input_grad.data()[i]
        );
    }
}

#[test]
fn maps_are_unit_range_and_cam_is_nonnegative() {
    let model = model_with_biases(4);
    let data = small_data(6, 12);
    let (fh, fw) = model.params.config.inception_spatial().unwrap();
    for seq in data.sequences.iter() {
        let a = attribute(&model, seq, None).unwrap();
        assert!(a.saliency.in_unit_range() && a.gradient_map.in_unit_range());
        assert!(a.raw_cam.data().iter().all(|&v| v >= 0.0));
        assert_eq!(a.raw_cam.shape(), &[3, fh, fw]);
        assert_eq!(a.saliency.shape(), [3, 1, 16, 16]);
    }
}

#[test]
fn shifting_both_scores_leaves_gradcam_unchanged() {
    let model = model_with_biases(6);
    let mut shifted = model.clone();
    shifted
        .params
        .tensors
        .get_mut("fc3.bias")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += 4.0);
    let data = small_data(4, 13);
    for seq in data.sequences.iter() {
        let a = attribute(&model, seq, None).unwrap();
        let b = attribute(&shifted, seq, None).unwrap();
        assert_eq!(a.class, b.class);
        for (x, y) in a.raw_cam.data().iter().zip(b.raw_cam.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.gradient_map, b.gradient_map);
    }
}

#[test]
fn black_sequence_on_bias_free_model_gives_zero_maps() {
    let cfg = small_net();
    let model = MapModel::new(init_parameters(&cfg, 1).unwrap(), HiddenState::zeros(2, 32)).unwrap();
    let mut seq: ImageSequence = small_data(2, 1).sequences[0].clone();
    seq.frames.data.iter_mut().for_each(|v| *v = 0.0);
    let a = attribute(&model, &seq, None).unwrap();
    assert!(a.saliency.data.iter().all(|&v| v == 0.0));
    assert!(a.gradient_map.data.iter().all(|&v| v == 0.0));
}

#[test]
fn regression_models_are_rejected() {
    let cfg = small_net().with_head(HeadKind::Regression);
    assert!(MapModel::new(init_parameters(&cfg, 1).unwrap(), HiddenState::zeros(2, 32)).is_err());
}

#[test]
fn subset_sizes_follow_the_ratio() {
    let model = model_with_biases(8);
    let data = small_data(10, 21);
    let before = model.params.checksum();
    let cfg = CannyConfig::default();
    assert!(generate_salient_subset(&model, &data, 0.0, 1, &cfg).unwrap().is_empty());
    let all = generate_salient_subset(&model, &data, 1.0, 1, &cfg).unwrap();
    assert_eq!(all.len(), 10);
    for seq in data.sequences.iter() {
        let m = &all[&seq.id];
        assert_eq!(m.source_sequence_id, seq.id);
        assert_eq!(m.provenance.model_checksum, before);
        assert!(m.edges.data.iter().all(|&v| v == 0.0 || v == 1.0));
        m.check_matches(&seq.frames).unwrap();
    }
    assert!(generate_salient_subset(&model, &data, 1.5, 1, &cfg).is_err());
    assert!(generate_salient_subset(&model, &data, -0.1, 1, &cfg).is_err());
    assert_eq!(model.params.checksum(), before);

    let picked = subset_indices(200, 0.1, 7);
    assert_eq!(picked.len(), 20);
    assert_eq!(picked, subset_indices(200, 0.1, 7));
    assert_ne!(picked, subset_indices(200, 0.1, 8));
    assert_eq!(subset_indices(200, 0.0, 7).len(), 0);
    assert_eq!(subset_indices(7, 1.0, 7), (0..7).collect::<Vec<_>>());
}

#[test]
fn subset_maps_are_deterministic() {
    let model = model_with_biases(9);
    let data = small_data(10, 22);
    let cfg = CannyConfig::default();
    let a = generate_salient_subset(&model, &data, 0.3, 4, &cfg).unwrap();
    let b = generate_salient_subset(&model, &data, 0.3, 4, &cfg).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
}
