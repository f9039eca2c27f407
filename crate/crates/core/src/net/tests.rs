use super::*;
use crate::rng;
use crate::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng::normal(rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn one_hot(batch: usize, classes: usize, hot: &[usize]) -> Tensor<f64> {
    let mut data = vec![0.0; batch * classes];
    for (b, &h) in hot.iter().enumerate() {
        data[b * classes + h] = 1.0;
    }
    Tensor::from_vec(&[batch, classes, 1, 1], data).unwrap()
}

/// conv -> bn -> elu -> pool -> dropout -> fc(2) -> softmax, a miniature of
/// the classifier stream.
fn small_classifier_net() -> Network<f64> {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [2, 9, 9]);
    let conv = b.node(
        "conv",
        LayerSpec::Conv2d {
            filters: 3,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (0, 0),
        },
        &[x],
    );
    let bn = b.node("bn", LayerSpec::BatchNorm, &[conv]);
    let elu = b.node("elu", LayerSpec::Elu { alpha: 1.0 }, &[bn]);
    let pool = b.node(
        "pool",
        LayerSpec::MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        },
        &[elu],
    );
    let drop = b.node("drop", LayerSpec::Dropout { rate: 0.5 }, &[pool]);
    let fc = b.node("fc", LayerSpec::FullyConnected { units: 2 }, &[drop]);
    let sm = b.node("softmax", LayerSpec::Softmax, &[fc]);
    Network::build(b.finish(sm).unwrap(), 7).unwrap()
}

#[test]
fn identity_conv_forward_passes_through() {
    // 1x1 conv with identity kernel and zero bias
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [1, 4, 4]);
    let conv = b.node(
        "conv",
        LayerSpec::Conv2d {
            filters: 1,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
        },
        &[x],
    );
    let mut net = Network::build(b.finish(conv).unwrap(), 0).unwrap();
    let slot = net.param_slots()[0];
    net.param_mut(slot).data_mut()[0] = 1.0;
    let slot_b = net.param_slots()[1];
    net.param_mut(slot_b).data_mut()[0] = 0.0;
    net.set_mode(Mode::Eval);
    let input = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
    let out = net.forward_eval(&[input.clone()]).unwrap();
    assert_eq!(out.data(), input.data());
}

#[test]
fn elu_asymptote_minus_one() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [1, 1, 1]);
    let e = b.node("elu", LayerSpec::Elu { alpha: 1.0 }, &[x]);
    let net: Network<f64> = Network::build(b.finish(e).unwrap(), 0).unwrap();
    let out = net
        .forward_eval(&[Tensor::from_vec(&[1, 1, 1, 1], vec![-1000.0]).unwrap()])
        .unwrap();
    assert!((out.data()[0] + 1.0).abs() < 1e-9);
}

#[test]
fn maxpool_2x2_takes_max_of_all_entries() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [1, 2, 2]);
    let p = b.node(
        "pool",
        LayerSpec::MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        },
        &[x],
    );
    let net: Network<f64> = Network::build(b.finish(p).unwrap(), 0).unwrap();
    let out = net
        .forward_eval(&[Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()])
        .unwrap();
    assert_eq!(out.data(), &[4.0]);
}

#[test]
fn uniform_logits_cross_entropy_is_ln2() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [2, 1, 1]);
    let id = b.node("id", LayerSpec::Identity, &[x]);
    let sm = b.node("softmax", LayerSpec::Softmax, &[id]);
    let mut net = Network::build(b.finish(sm).unwrap(), 0).unwrap();
    let mut rng = rng::substream(1, "t");
    let input = Tensor::from_vec(&[1, 2, 1, 1], vec![0.7, 0.7]).unwrap();
    net.forward_train(&[input], &mut rng).unwrap();
    let loss = net
        .backward(LossKind::CrossEntropySoftmax, &one_hot(1, 2, &[0]))
        .unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
}

#[test]
fn mse_of_identical_tensors_is_zero() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [1, 3, 3]);
    let id = b.node("id", LayerSpec::Identity, &[x]);
    let mut net = Network::build(b.finish(id).unwrap(), 0).unwrap();
    let mut rng = rng::substream(1, "t");
    let input = rand_tensor(&[2, 1, 3, 3], &mut rng);
    net.forward_train(&[input.clone()], &mut rng).unwrap();
    let loss = net.backward(LossKind::MeanSquaredError, &input).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn backward_without_forward_is_state_error() {
    let mut net = small_classifier_net();
    let err = net
        .backward(LossKind::CrossEntropySoftmax, &one_hot(3, 2, &[0, 1, 0]))
        .unwrap_err();
    assert!(matches!(err, crate::error::Error::State(_)));
}

#[test]
fn shape_mismatch_names_offending_node() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [1, 4, 4]);
    let p = b.node(
        "toolarge",
        LayerSpec::MaxPool2d {
            kernel: (5, 5),
            stride: (1, 1),
        },
        &[x],
    );
    let err = Network::<f64>::build(b.finish(p).unwrap(), 0).err().unwrap();
    let msg = err.to_string();
    assert!(msg.contains("toolarge"), "{msg}");
}

#[test]
fn gradients_match_finite_differences_two_layer_net() {
    // fully_connected-only net: strictest tolerance
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [5, 1, 1]);
    let fc1 = b.node("fc1", LayerSpec::FullyConnected { units: 4 }, &[x]);
    let e = b.node("elu", LayerSpec::Elu { alpha: 1.0 }, &[fc1]);
    let fc2 = b.node("fc2", LayerSpec::FullyConnected { units: 2 }, &[e]);
    let sm = b.node("softmax", LayerSpec::Softmax, &[fc2]);
    let mut net = Network::build(b.finish(sm).unwrap(), 3).unwrap();
    let mut rng = rng::substream(5, "fd");
    let batch = FdBatch {
        inputs: vec![rand_tensor(&[3, 5, 1, 1], &mut rng)],
        loss: LossKind::CrossEntropySoftmax,
        target: one_hot(3, 2, &[0, 1, 1]),
    };
    let err = finite_difference_check(&mut net, &batch, 1e-6).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn gradients_match_finite_differences_conv_bn_elu_dropout() {
    let mut net = small_classifier_net();
    let mut rng = rng::substream(6, "fd");
    let batch = FdBatch {
        inputs: vec![rand_tensor(&[3, 2, 9, 9], &mut rng)],
        loss: LossKind::CrossEntropySoftmax,
        target: one_hot(3, 2, &[1, 0, 1]),
    };
    let err = finite_difference_check(&mut net, &batch, 1e-6).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn gradients_match_finite_differences_autoencoder_shape() {
    // conv(same) -> bn -> elu -> pool -> fc -> elu -> fc -> upsample path -> conv, MSE
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [1, 8, 8]);
    let conv = b.node(
        "enc_conv",
        LayerSpec::Conv2d {
            filters: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
        },
        &[x],
    );
    let bn = b.node("enc_bn", LayerSpec::BatchNorm, &[conv]);
    let e1 = b.node("enc_elu", LayerSpec::Elu { alpha: 1.0 }, &[bn]);
    let pool = b.node(
        "enc_pool",
        LayerSpec::MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        },
        &[e1],
    );
    let code = b.node("code", LayerSpec::FullyConnected { units: 6 }, &[pool]);
    let e2 = b.node("code_elu", LayerSpec::Elu { alpha: 1.0 }, &[code]);
    let expand = b.node("dec_fc", LayerSpec::FullyConnected { units: 2 * 4 * 4 }, &[e2]);
    let e3 = b.node("dec_elu", LayerSpec::Elu { alpha: 1.0 }, &[expand]);
    // reshape happens implicitly: fc output (32,1,1) feeds a conv via identity?
    // conv needs spatial input; use upsample on a (2,4,4)-shaped view
    let spec_err = b.finish(e3);
    assert!(spec_err.is_ok());
    // fc output is flat, so the decoder conv consumes it through an explicit
    // reshape node; the engine treats shapes structurally, so model it by a
    // dedicated network below.
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [2, 4, 4]);
    let up = b.node("up", LayerSpec::Upsample2d { factor: (2, 2) }, &[x]);
    let conv = b.node(
        "dec_conv",
        LayerSpec::Conv2d {
            filters: 1,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
        },
        &[up],
    );
    let mut net = Network::build(b.finish(conv).unwrap(), 11).unwrap();
    let mut rng = rng::substream(12, "fd");
    let batch = FdBatch {
        inputs: vec![rand_tensor(&[2, 2, 4, 4], &mut rng)],
        loss: LossKind::MeanSquaredError,
        target: rand_tensor(&[2, 1, 8, 8], &mut rng),
    };
    let err = finite_difference_check(&mut net, &batch, 1e-6).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn gradients_match_finite_differences_multi_stream_fanin() {
    // two streams fused by one fully_connected node, like the subnetworks
    let mut b = NetworkBuilder::new();
    let xa = b.input("a", [1, 6, 6]);
    let xb = b.input("b", [1, 6, 6]);
    let ca = b.node(
        "conv_a",
        LayerSpec::Conv2d {
            filters: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (0, 0),
        },
        &[xa],
    );
    let ea = b.node("elu_a", LayerSpec::Elu { alpha: 1.0 }, &[ca]);
    let cb = b.node(
        "conv_b",
        LayerSpec::Conv2d {
            filters: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (0, 0),
        },
        &[xb],
    );
    let eb = b.node("elu_b", LayerSpec::Elu { alpha: 1.0 }, &[cb]);
    let fuse = b.node("fuse", LayerSpec::FullyConnected { units: 3 }, &[ea, eb]);
    let fc = b.node("head", LayerSpec::FullyConnected { units: 2 }, &[fuse]);
    let sm = b.node("softmax", LayerSpec::Softmax, &[fc]);
    let mut net = Network::build(b.finish(sm).unwrap(), 21).unwrap();
    let mut rng = rng::substream(22, "fd");
    let batch = FdBatch {
        inputs: vec![
            rand_tensor(&[3, 1, 6, 6], &mut rng),
            rand_tensor(&[3, 1, 6, 6], &mut rng),
        ],
        loss: LossKind::CrossEntropySoftmax,
        target: one_hot(3, 2, &[0, 1, 0]),
    };
    let err = finite_difference_check(&mut net, &batch, 1e-6).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn full_batchnorm_gradient_matches_fd_with_live_stats() {
    // the training-path BN backward (statistics depend on the batch) checked
    // against finite differences that recompute the statistics every eval
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [2, 3, 3]);
    let conv = b.node(
        "conv",
        LayerSpec::Conv2d {
            filters: 2,
            kernel: (2, 2),
            stride: (1, 1),
            padding: (0, 0),
        },
        &[x],
    );
    let bn = b.node("bn", LayerSpec::BatchNorm, &[conv]);
    let e = b.node("elu", LayerSpec::Elu { alpha: 1.0 }, &[bn]);
    let fc = b.node("fc", LayerSpec::FullyConnected { units: 2 }, &[e]);
    let sm = b.node("softmax", LayerSpec::Softmax, &[fc]);
    let mut net = Network::build(b.finish(sm).unwrap(), 31).unwrap();
    net.set_mode(Mode::Train);
    let mut rng = rng::substream(33, "fd-live-bn");
    let inputs = vec![rand_tensor(&[4, 2, 3, 3], &mut rng)];
    let target = one_hot(4, 2, &[0, 1, 1, 0]);

    net.forward_train(&inputs, &mut rng).unwrap();
    let noise = net.capture_noise().unwrap();
    // analytic with live batch statistics
    net.forward_frozen(&inputs, &noise, false).unwrap();
    net.backward(LossKind::CrossEntropySoftmax, &target).unwrap();
    let slots = net.param_slots();
    let analytic: Vec<Vec<f64>> = slots
        .iter()
        .map(|&s| net.param(s).grad().unwrap().to_vec())
        .collect();
    let eps = 1e-5;
    let mut max_rel: f64 = 0.0;
    for (si, &slot) in slots.iter().enumerate() {
        for j in 0..net.param(slot).len() {
            let orig = net.param(slot).data()[j];
            net.param_mut(slot).data_mut()[j] = orig + eps;
            net.forward_frozen(&inputs, &noise, false).unwrap();
            let lp = net.loss_value(LossKind::CrossEntropySoftmax, &target).unwrap();
            net.param_mut(slot).data_mut()[j] = orig - eps;
            net.forward_frozen(&inputs, &noise, false).unwrap();
            let lm = net.loss_value(LossKind::CrossEntropySoftmax, &target).unwrap();
            net.param_mut(slot).data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[si][j];
            // floor at 1e-6: gradients through live-stat BN toward upstream
            // parameters are near-invariant to scale, so tiny true values
            // sit at the FD roundoff level
            max_rel = max_rel.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    assert!(max_rel < 1e-4, "live-stat BN max rel err {max_rel}");
}

#[test]
fn batchnorm_train_output_is_standardized_before_scale_shift() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [3, 4, 4]);
    let bn = b.node("bn", LayerSpec::BatchNorm, &[x]);
    let mut net = Network::build(b.finish(bn).unwrap(), 0).unwrap();
    let mut rng = rng::substream(44, "bn");
    // gamma=1, beta=0 at init, so the output *is* x-hat
    let input = rand_tensor(&[5, 3, 4, 4], &mut rng);
    let out = net.forward_train(&[input], &mut rng).unwrap();
    let (c, plane, batch) = (3, 16, 5);
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for bi in 0..batch {
            for o in 0..plane {
                let v = out.data()[(bi * c + ch) * plane + o];
                sum += v;
                sum2 += v * v;
            }
        }
        let m = (batch * plane) as f64;
        let mean = sum / m;
        let var = sum2 / m - mean * mean;
        assert!(mean.abs() < 1e-3, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
}

#[test]
fn loss_invariant_under_batch_permutation() {
    let mut net = small_classifier_net();
    let mut rng = rng::substream(50, "perm");
    let batch = 4;
    let chw = 2 * 9 * 9;
    let input = rand_tensor(&[batch, 2, 9, 9], &mut rng);
    let targets = [0usize, 1, 1, 0];

    // permutation of batch elements, dropout disabled via eval-free path:
    // replay identical dropout masks is impossible across permutation, so
    // use a net without dropout for the invariance property
    let mut b = NetworkBuilder::new();
    let x = b.input("x", [2, 9, 9]);
    let conv = b.node(
        "conv",
        LayerSpec::Conv2d {
            filters: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (0, 0),
        },
        &[x],
    );
    let bn = b.node("bn", LayerSpec::BatchNorm, &[conv]);
    let e = b.node("elu", LayerSpec::Elu { alpha: 1.0 }, &[bn]);
    let fc = b.node("fc", LayerSpec::FullyConnected { units: 2 }, &[e]);
    let sm = b.node("softmax", LayerSpec::Softmax, &[fc]);
    let spec = b.finish(sm).unwrap();
    let mut net2 = Network::build(spec, 61).unwrap();
    net.set_mode(Mode::Train);

    let perm = [2usize, 0, 3, 1];
    let mut perm_data = vec![0.0; input.len()];
    for (dst, &src) in perm.iter().enumerate() {
        perm_data[dst * chw..(dst + 1) * chw]
            .copy_from_slice(&input.data()[src * chw..(src + 1) * chw]);
    }
    let perm_input = Tensor::from_vec(&[batch, 2, 9, 9], perm_data).unwrap();
    let perm_targets: Vec<usize> = perm.iter().map(|&i| targets[i]).collect();

    net2.forward_train(&[input], &mut rng).unwrap();
    let l1 = net2
        .backward(LossKind::CrossEntropySoftmax, &one_hot(batch, 2, &targets))
        .unwrap();
    net2.forward_train(&[perm_input], &mut rng).unwrap();
    let l2 = net2
        .backward(LossKind::CrossEntropySoftmax, &one_hot(batch, 2, &perm_targets))
        .unwrap();
    assert!((l1 - l2).abs() < 1e-10, "{l1} vs {l2}");
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let mut net = small_classifier_net();
    net.set_mode(Mode::Eval);
    let mut rng = rng::substream(70, "det");
    let input = rand_tensor(&[2, 2, 9, 9], &mut rng);
    let a = net.forward_eval(&[input.clone()]).unwrap();
    let b = net.forward_eval(&[input]).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn weights_round_trip_through_container() {
    let net = small_classifier_net();
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = net
        .named_tensors()
        .into_iter()
        .map(|(n, s, d)| (n, s, d.into_iter().map(|v| v as f32).collect()))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.myow");
    crate::weights::save_weights(&path, &tensors).unwrap();
    let loaded = crate::weights::load_weights(&path).unwrap();
    assert_eq!(tensors, loaded);

    // and back into a float net
    let mut net2: Network<f32> = Network::build(net.spec().clone(), 999).unwrap();
    let as_f32: Vec<(String, Vec<usize>, Vec<f32>)> = loaded;
    net2.load_named_tensors(&as_f32).unwrap();
    let t2 = net2.named_tensors();
    for ((n1, s1, d1), (n2, s2, d2)) in tensors.iter().zip(&t2) {
        assert_eq!(n1, n2);
        assert_eq!(s1, s2);
        assert_eq!(d1, d2);
    }
}
