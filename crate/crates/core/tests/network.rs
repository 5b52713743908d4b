mod common;

use sttl_core::network::{
    classify, decide, forward, forward_batch, init_hidden_random, init_parameters, load_checkpoint, save_checkpoint,
    HeadKind, HiddenState, ImageSequence, Label, NetworkConfig, NetworkError, Target,
};
use sttl_core::synthdata::{generate_dataset, town_a, Dataset};

fn data(n: usize, h: usize, w: usize, t: usize, seed: u64) -> Dataset {
    Dataset::new(generate_dataset(&town_a().with_size(h, w), n, 0.5, t, seed).unwrap())
}

#[test]
fn sampled_gradients_match_finite_differences() {
    let cfg = NetworkConfig::toy(8, 8, 2);
    for trial in 0..3 {
        let p = common::NetProblem::random(&cfg, 2, 100 + trial);
        let worst = common::network_gradient_check(&p, 3, 1e-5, 1e-6, trial);
        assert!(worst.0 < 1e-4, "{worst:?}");
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn regression_head_gradients_match_finite_differences() {
    use sttl_core::network::{build_graph, ParamVars};
    use sttl_core::tensor::Tape;
    let cfg = NetworkConfig::toy(8, 8, 2).with_head(HeadKind::Regression);
    let p = common::NetProblem::random(&cfg, 2, 7);
    let loss = |params: &sttl_core::network::Parameters, tape: &mut Tape, grad: bool| {
        let pv = ParamVars::bind(tape, params, grad);
        let x = tape.constant(p.input.clone());
        let g = build_graph(tape, &cfg, &pv, x, 2, &p.h0).unwrap();
        let l = tape.mse(g.output, &[3.0, -7.5]).unwrap();
        (pv, l)
    };
    let mut tape = Tape::new();
    let (pv, l) = loss(&p.params, &mut tape, true);
    tape.backward(l).unwrap();
    let w = pv.get("fc3.weight").unwrap();
    let g = tape.grad(w).unwrap().to_vec();
    let mut params = p.params.clone();
    for i in 0..g.len() {
        let orig = params.tensors["fc3.weight"].data()[i];
        let mut eval = |v: f64| {
            params.tensors.get_mut("fc3.weight").unwrap().data_mut()[i] = v;
            let mut t = Tape::new();
            let (_, l) = loss(&params, &mut t, false);
            t.value(l).item()
        };
        let numeric = (eval(orig + 1e-5) - eval(orig - 1e-5)) / 2e-5;
        eval(orig);
        assert!(common::rel_err(g[i], numeric, 1e-6) < 1e-4);
    }
}

#[test]
fn initialisation_is_deterministic_and_scaled() {
    let cfg = NetworkConfig::toy(24, 32, 15);
    let a = init_parameters(&cfg, 3).unwrap();
    assert_eq!(a, init_parameters(&cfg, 3).unwrap());
    assert_ne!(a.checksum(), init_parameters(&cfg, 4).unwrap().checksum());
    for (name, t) in &a.tensors {
        if name.ends_with("bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    // bridge.weight is the 64x64 matrix.
    let w = a.get("bridge.weight").unwrap();
    assert_eq!(w.shape(), &[64, 64]);
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = 2.0 / 128.0;
    assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
}

#[test]
fn random_hidden_state_has_the_configured_spread() {
    let cfg = NetworkConfig::toy(24, 32, 15);
    let h = init_hidden_random(&cfg, 1).unwrap();
    assert_eq!(h, init_hidden_random(&cfg, 1).unwrap());
    assert_eq!(h.layers.len(), 2);
    assert!(h.layers.iter().all(|l| l.h.len() == 32 && l.c.len() == 32));
    let mut draws = Vec::new();
    let mut seed = 0;
    while draws.len() < 10_000 {
        let s = init_hidden_random(&cfg, seed).unwrap();
        for l in s.layers {
            draws.extend(l.h);
            draws.extend(l.c);
        }
        seed += 1;
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd / 0.1 - 1.0).abs() < 0.1, "sd {sd}");
}

#[test]
fn config_validation() {
    assert!(NetworkConfig::toy(24, 32, 15).validate().is_ok());
    assert!(NetworkConfig::toy(24, 32, 15).with_channels(4).validate().is_err());
    assert!(NetworkConfig::toy(0, 32, 15).validate().is_err());
    assert!(NetworkConfig::toy(24, 32, 0).validate().is_err());
    let cfg = NetworkConfig::toy(24, 32, 15);
    assert_eq!(NetworkConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    assert_ne!(cfg.digest(), cfg.clone().with_channels(6).digest());
    assert_eq!(cfg.transfer_digest(), cfg.clone().with_channels(6).transfer_digest());
    assert_eq!(cfg.inception_spatial().unwrap(), (2, 2));
    assert_eq!(cfg.inception_feature_len(), 256);
}

#[test]
fn outputs_are_probabilities_and_deterministic() {
    let cfg = NetworkConfig::toy(16, 16, 3);
    let p = common::NetProblem::random(&cfg, 1, 2).params;
    let h0 = init_hidden_random(&cfg, 2).unwrap();
    for seq in data(5, 16, 16, 3, 4).sequences.iter() {
        let a = forward(&p, seq, &h0).unwrap();
        assert_eq!(a.output.len(), 2);
        assert!((a.output.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let b = forward(&p, seq, &h0).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.inception_features.shape(), &[3, 64]);
    }
}

#[test]
fn final_state_does_not_depend_on_batch_company() {
    let cfg = NetworkConfig::toy(16, 16, 3);
    let p = common::NetProblem::random(&cfg, 1, 3).params;
    let h0 = init_hidden_random(&cfg, 3).unwrap();
    let d = data(4, 16, 16, 3, 5);
    let seqs: Vec<&ImageSequence> = d.sequences.iter().collect();
    let batch = forward_batch(&p, &seqs, &[None; 4], &h0).unwrap();
    for (i, seq) in seqs.iter().enumerate() {
        let alone = forward(&p, seq, &h0).unwrap();
        for (a, b) in alone.hidden.layers.iter().zip(&batch.hidden[i].layers) {
            for (x, y) in a.h.iter().chain(&a.c).zip(b.h.iter().chain(&b.c)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn decisions_and_head_checks() {
    assert_eq!(decide(&[0.5, 0.5]), Label::Safe);
    assert_eq!(decide(&[0.9, 0.1]), Label::Safe);
    assert_eq!(decide(&[0.2, 0.8]), Label::Collision);
    let cfg = NetworkConfig::toy(16, 16, 3).with_head(HeadKind::Regression);
    let p = init_parameters(&cfg, 1).unwrap();
    let seq = &data(1, 16, 16, 3, 1).sequences[0];
    assert!(matches!(
        classify(&p, seq, &HiddenState::zeros(2, 32)),
        Err(NetworkError::HeadMismatch(_))
    ));
    let out = forward(&p, seq, &HiddenState::zeros(2, 32)).unwrap();
    assert_eq!(out.output.len(), 1);
}

#[test]
fn wrong_frame_size_is_a_shape_error() {
    let p = init_parameters(&NetworkConfig::toy(16, 16, 3), 1).unwrap();
    let seq = &data(1, 24, 32, 3, 1).sequences[0];
    assert!(forward(&p, seq, &HiddenState::zeros(2, 32)).is_err());
    let short = &data(1, 16, 16, 2, 1).sequences[0];
    assert!(forward(&p, short, &HiddenState::zeros(2, 32)).is_err());
    assert!(forward(&p, &data(1, 16, 16, 3, 1).sequences[0], &HiddenState::zeros(2, 8)).is_err());
}

#[test]
fn trained_model_is_order_sensitive_and_detects_collisions() {
    let (train, model) = common::trained_toy();
    let fresh = data(40, 16, 16, 4, 999);
    let mut correct = 0;
    for seq in fresh.sequences.iter() {
        let out = forward(&model.params, seq, &model.hidden).unwrap();
        if decide(&out.output) == seq.target.label().unwrap() {
            correct += 1;
        }
    }
    assert!(correct >= 30, "{correct}/40 on fresh sequences");

    let collision = train
        .sequences
        .iter()
        .find(|s| s.target == Target::Class(Label::Collision))
        .unwrap();
    let out = forward(&model.params, collision, &model.hidden).unwrap();
    assert_eq!(decide(&out.output), Label::Collision);
    assert!(out.output[Label::Collision.index()] > 0.5);

    let mut reversed = collision.clone();
    let t = reversed.frames.t;
    let len = reversed.frames.frame_len();
    let orig = collision.frames.data.clone();
    for i in 0..t {
        reversed.frames.data[i * len..(i + 1) * len].copy_from_slice(&orig[(t - 1 - i) * len..(t - i) * len]);
    }
    let rev = forward(&model.params, &reversed, &model.hidden).unwrap();
    use sttl_core::similarity::{cosine, FeatureSource, FeatureVector};
    let fv = |h: &HiddenState| FeatureVector::new(h.top_h().to_vec(), FeatureSource::HiddenState, "toy");
    let c = cosine(&fv(&out.hidden), &fv(&rev.hidden)).unwrap();
    assert!(c < 0.999, "cosine {c}");
}

#[test]
fn checkpoints_round_trip() {
    let (_, model) = common::trained_toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model.params, Some(&model.hidden), &path).unwrap();
    let (p, h) = load_checkpoint(&path).unwrap();
    assert_eq!(p, model.params);
    assert_eq!(h.as_ref(), Some(&model.hidden));
    save_checkpoint(&model.params, None, &path).unwrap();
    assert!(load_checkpoint(&path).unwrap().1.is_none());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
