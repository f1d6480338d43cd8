use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::composite_loss;
use crate::audio::Label;
use crate::dsp::DspConfig;

/// 80x126 hybrid map: 64-sample frames plus 16 mel bins.
fn small_config() -> ModelConfig {
    ModelConfig {
        dsp: DspConfig {
            clip_seconds: 0.25,
            frame_ms: 4.0,
            hop_ms: 2.0,
            n_mels: 16,
            ..DspConfig::default()
        },
        deep_channels: 2,
        base_channels: 2,
        ..ModelConfig::default()
    }
}

fn noise_clip(seed: u64, n: usize) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    AudioClip::new(format!("c{seed}"), samples, Label::Unknown).unwrap()
}

fn batch_of(net: &Network, seeds: &[u64]) -> Batch {
    let n = net.config().dsp.clip_samples().unwrap();
    let feats: Vec<Features> = seeds
        .iter()
        .map(|&s| net.features(&noise_clip(s, n)).unwrap())
        .collect();
    let refs: Vec<&Features> = feats.iter().collect();
    Batch::new(&refs).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn small_trace() {
    let net = Network::new(small_config()).unwrap();
    assert_eq!(net.trace().hybrid, (80, 126));
    assert_eq!(net.trace().blocks, [(40, 63), (20, 31), (10, 15), (5, 7)]);
}

#[test]
fn default_forward_shapes() {
    let net = Network::new(ModelConfig::default()).unwrap();
    let batch = batch_of(&net, &[1]);
    let h = net.hybrid_features(&batch, BnMode::Eval).unwrap();
    assert_eq!(h.shape(), &[1, 640, 126]);
    let out = net.forward(&batch, Some(&[1.0]), BnMode::Eval).unwrap();
    assert_eq!(out.scores.len(), 1);
    assert!(out.scores[0] > 0.0 && out.scores[0] < 1.0);
    assert_eq!(out.frame_scores.shape(), &[1, 126]);
    assert!(out.loss.unwrap().total.is_finite());
}

#[test]
fn zero_weights_give_zero_deep_features() {
    let mut net = Network::new(small_config()).unwrap();
    for name in ["deep.conv1.w", "deep.conv2.w", "deep.conv3.w"] {
        net.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let batch = batch_of(&net, &[7]);
    let out = net.deep_features(&batch, BnMode::Eval).unwrap();
    assert_eq!(out.shape(), &[1, 64, 126]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fuse_stacks_and_checks_time_axis() {
    let deep = random_tensor(&[2, 3, 5], 1);
    let mel = random_tensor(&[2, 2, 5], 2);
    let h = fuse(&deep, &mel).unwrap();
    assert_eq!(h.shape(), &[2, 5, 5]);
    for i in 0..2 {
        assert_eq!(&h.data()[i * 25..i * 25 + 15], &deep.data()[i * 15..(i + 1) * 15]);
        assert_eq!(&h.data()[i * 25 + 15..(i + 1) * 25], &mel.data()[i * 10..(i + 1) * 10]);
    }
    let short = random_tensor(&[2, 2, 4], 3);
    assert!(matches!(
        fuse(&deep, &short),
        Err(ModelError::TimeAxisMismatch { deep: 5, mel: 4 })
    ));
}

#[test]
fn features_reject_mismatched_time_axes() {
    let raw = FrameMatrix {
        frame_len: 4,
        n_frames: 3,
        data: vec![0.0; 12],
        windowed: false,
    };
    let mel = MelFeature {
        n_mels: 2,
        n_frames: 4,
        data: vec![0.0; 8],
    };
    assert!(matches!(
        Features::from_parts(raw, mel),
        Err(ModelError::TimeAxisMismatch { .. })
    ));
}

#[test]
fn zero_query_key_gives_uniform_attention() {
    let (d, t) = (6, 9);
    let h = random_tensor(&[1, d, t], 4);
    let zero = Tensor::zeros(&[d, d]);
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let out = self_attention(&h, &zero, &zero, &eye, (t as f64).sqrt()).unwrap();
    for &a in out.weights.data() {
        assert!((a - 1.0 / d as f64).abs() < 1e-15);
    }
    for c in 0..t {
        let mean: f64 = (0..d).map(|r| h.data()[r * t + c]).sum::<f64>() / d as f64;
        for r in 0..d {
            assert!((out.output.data()[r * t + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_direct_formula() {
    let (d, t) = (5, 7);
    let h = random_tensor(&[d, t], 5);
    let (wq, wk, wv) = (
        random_tensor(&[d, d], 6),
        random_tensor(&[d, d], 7),
        random_tensor(&[d, d], 8),
    );
    let scale = (t as f64).sqrt();
    let out = self_attention(&h, &wq, &wk, &wv, scale).unwrap();
    let mm = |a: &[f64], b: &[f64], n: usize, k: usize, m: usize| {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                c[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
            }
        }
        c
    };
    let q = mm(wq.data(), h.data(), d, d, t);
    let k = mm(wk.data(), h.data(), d, d, t);
    let v = mm(wv.data(), h.data(), d, d, t);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        let logits: Vec<f64> = (0..d)
            .map(|j| (0..t).map(|l| q[i * t + l] * k[j * t + l]).sum::<f64>() / scale)
            .collect();
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        for j in 0..d {
            a[i * d + j] = logits[j].exp() / z;
        }
    }
    let o = mm(&a, &v, d, d, t);
    for (x, y) in out.weights.data().iter().zip(&a) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in out.output.data().iter().zip(&o) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn attention_is_equivariant_to_frame_permutation() {
    let (d, t) = (6, 8);
    let h = random_tensor(&[d, t], 9);
    let (wq, wk, wv) = (
        random_tensor(&[d, d], 10),
        random_tensor(&[d, d], 11),
        random_tensor(&[d, d], 12),
    );
    let perm = [3, 0, 7, 5, 1, 6, 2, 4];
    let permute = |x: &Tensor| {
        Tensor::from_fn(&[d, t], |i| x.data()[(i / t) * t + perm[i % t]])
    };
    let a = self_attention(&h, &wq, &wk, &wv, 2.0).unwrap();
    let b = self_attention(&permute(&h), &wq, &wk, &wv, 2.0).unwrap();
    for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in permute(&a.output).data().iter().zip(b.output.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn scaling_the_input_changes_attention() {
    let (d, t) = (6, 8);
    let h = random_tensor(&[d, t], 13);
    let (wq, wk, wv) = (
        random_tensor(&[d, d], 14),
        random_tensor(&[d, d], 15),
        random_tensor(&[d, d], 16),
    );
    let a = self_attention(&h, &wq, &wk, &wv, 2.0).unwrap();
    let h3 = Tensor::from_fn(&[d, t], |i| 3.0 * h.data()[i]);
    let b = self_attention(&h3, &wq, &wk, &wv, 2.0).unwrap();
    let diff = a
        .weights
        .data()
        .iter()
        .zip(b.weights.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-3);
}

#[test]
fn zeroed_unit_is_identity() {
    let mut net = Network::new(small_config()).unwrap();
    for name in ["block1.0.conv2.w", "block1.0.conv2.b"] {
        net.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let mut b = net.bind(&mut g, false, BnMode::Eval);
    let x = g.constant(random_tensor(&[2, 2, 40, 63], 17));
    let y = net.unit(&mut g, &mut b, x, "block1.0", 2, false).unwrap();
    assert_eq!(g.value(x), g.value(y));
}

#[test]
fn projection_skip_samples_window_centres() {
    let mut net = Network::new(small_config()).unwrap();
    for name in ["block2.0.conv2.w", "block2.0.conv2.b"] {
        net.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    // Projection copies channel 0 into every output channel.
    let proj = net.params_mut().get_mut("block2.0.proj.w").unwrap();
    let c_in = proj.shape()[1];
    let data = proj.data_mut();
    for (i, v) in data.iter_mut().enumerate() {
        *v = if i % c_in == 0 { 1.0 } else { 0.0 };
    }
    let mut g = Graph::new();
    let mut b = net.bind(&mut g, false, BnMode::Eval);
    let input = random_tensor(&[1, 2, 40, 63], 18);
    let x = g.constant(input.clone());
    let y = net.unit(&mut g, &mut b, x, "block2.0", 4, true).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 20, 31]);
    let out = g.value(y).data();
    for c in 0..4 {
        for i in 0..20 {
            for j in 0..31 {
                let expect = input.data()[(2 * i) * 63 + 2 * j + 1];
                assert_eq!(out[(c * 20 + i) * 31 + j], expect);
            }
        }
    }
}

#[test]
fn forward_loss_matches_composite_loss() {
    let mut cfg = small_config();
    cfg.lambda = 0.5;
    let net = Network::new(cfg).unwrap();
    let batch = batch_of(&net, &[1, 2, 3]);
    let y = [1.0, 0.0, 1.0];
    let out = net.forward(&batch, Some(&y), BnMode::Train).unwrap();
    let parts = out.loss.unwrap();
    let direct = composite_loss(&out.frame_scores, &out.scores, &y, 0.5).unwrap();
    assert!((parts.l_att - direct.l_att).abs() < 1e-9 * direct.l_att.max(1.0));
    assert!((parts.l_fin - direct.l_fin).abs() < 1e-9 * direct.l_fin.max(1.0));
    assert_eq!(parts.total, parts.l_att + 0.5 * parts.l_fin);
    assert!(matches!(
        net.forward(&batch, Some(&[1.0, 0.5, 0.0]), BnMode::Train),
        Err(ModelError::TargetOutOfRange(_))
    ));
}

#[test]
fn eval_scores_do_not_depend_on_batch_composition() {
    let net = Network::new(small_config()).unwrap();
    let n = net.config().dsp.clip_samples().unwrap();
    let feats: Vec<Features> = (0..5).map(|s| net.features(&noise_clip(s, n)).unwrap()).collect();
    let together = net.score(&feats, 5).unwrap();
    let single = net.score(&feats, 1).unwrap();
    assert_eq!(together, single);
}

#[test]
fn train_mode_leaves_stored_stats_alone() {
    let net = Network::new(small_config()).unwrap();
    let batch = batch_of(&net, &[1, 2]);
    let before = net.params().clone();
    let grads = net.gradients(&batch, &[1.0, 0.0], BnMode::Train).unwrap();
    assert_eq!(net.params(), &before);
    assert_ne!(grads.stats, before.stats().to_vec());
}

#[test]
fn every_parameter_receives_gradient() {
    let net = Network::new(small_config()).unwrap();
    let batch = batch_of(&net, &[1, 2]);
    let grads = net.gradients(&batch, &[1.0, 0.0], BnMode::Train).unwrap();
    for (name, g) in net.params().names().iter().zip(&grads.grads) {
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
        assert!(g.iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let net = Network::new(small_config()).unwrap();
    let batch = batch_of(&net, &[21, 22]);
    let report = crate::model::check_model_gradients(&net, &batch, &[1.0, 0.0], 1e-4, 3, 3).unwrap();
    assert_eq!(report.tensors.len(), net.params().len());
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn replayed_pattern_reproduces_the_loss() {
    let net = Network::new(small_config()).unwrap();
    let batch = batch_of(&net, &[5, 6]);
    let y = [0.0, 1.0];
    let pattern = net.kink_pattern(&batch, BnMode::Train).unwrap();
    let free = net.forward(&batch, Some(&y), BnMode::Train).unwrap().loss.unwrap();
    let fixed = net.loss_with_pattern(&batch, &y, BnMode::Train, &pattern).unwrap();
    assert_eq!(free, fixed);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut net = Network::new(small_config()).unwrap();
    let batch = batch_of(&net, &[1, 2]);
    let grads = net.gradients(&batch, &[1.0, 0.0], BnMode::Train).unwrap();
    net.params_mut().stats_mut().clone_from_slice(&grads.stats);
    net.save(&path).unwrap();
    let loaded = Network::load(small_config(), &path).unwrap();
    assert_eq!(loaded, net);
    let a = net.forward(&batch, None, BnMode::Eval).unwrap();
    let b = loaded.forward(&batch, None, BnMode::Eval).unwrap();
    assert_eq!(a, b);

    let mut other = small_config();
    other.base_channels = 3;
    assert!(Network::load(other, &path).is_err());
}
