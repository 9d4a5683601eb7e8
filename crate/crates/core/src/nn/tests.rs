use super::*;
use crate::error::Error;

fn identity_dense_net(classes: usize) -> Network {
    // flatten -> dense(C -> C) with W = identity, b = 0
    let arch = Architecture::mlp(classes, 1, 1, &[], classes).unwrap();
    let mut net = Network::new(arch, 0).unwrap();
    let mut w = vec![0.0f32; classes * classes];
    for i in 0..classes {
        w[i * classes + i] = 1.0;
    }
    net.set_params(vec![
        Tensor::new(vec![classes, classes], w).unwrap(),
        Tensor::zeros(vec![classes]),
    ])
    .unwrap();
    net
}

#[test]
fn all_zero_parameters_give_all_zero_logits() {
    let arch = Architecture::small_cnn_sized(1, 8, 8, 4, 4, 8).unwrap();
    let mut net = Network::new(arch, 1).unwrap();
    let zeros: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
        .collect();
    net.set_params(zeros).unwrap();
    let batch = Tensor::filled(vec![2, 1, 8, 8], 0.7);
    let logits = net.forward(&batch).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_dense_maps_one_hot_to_itself() {
    let net = identity_dense_net(5);
    let mut x = Tensor::zeros(vec![1, 5, 1, 1]);
    x.data_mut()[3] = 1.0;
    let logits = net.forward(&x).unwrap();
    assert_eq!(logits.data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
}

/// Independent triple-loop oracle for a two-dense-layer ReLU network.
fn mlp_oracle(
    x: &[f32],
    fin: usize,
    w1: &[f32],
    b1: &[f32],
    hidden: usize,
    w2: &[f32],
    b2: &[f32],
    out: usize,
) -> Vec<f64> {
    let mut h = vec![0.0f64; hidden];
    for j in 0..hidden {
        let mut acc = b1[j] as f64;
        for i in 0..fin {
            acc += x[i] as f64 * w1[j * fin + i] as f64;
        }
        h[j] = acc.max(0.0);
    }
    let mut y = vec![0.0f64; out];
    for k in 0..out {
        let mut acc = b2[k] as f64;
        for j in 0..hidden {
            acc += h[j] * w2[k * hidden + j] as f64;
        }
        y[k] = acc;
    }
    y
}

#[test]
fn random_two_layer_net_matches_matmul_oracle() {
    let arch = Architecture::mlp(1, 3, 4, &[7], 5).unwrap();
    let net = Network::new(arch, 33).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Tensor::new(vec![1, 1, 3, 4], x.clone()).unwrap();
    let logits = net.forward(&batch).unwrap();

    let p = net.params();
    let expect = mlp_oracle(
        &x,
        12,
        p[0].tensor.data(),
        p[1].tensor.data(),
        7,
        p[2].tensor.data(),
        p[3].tensor.data(),
        5,
    );
    for (got, want) in logits.data().iter().zip(&expect) {
        let rel = (*got as f64 - want).abs() / want.abs().max(1e-9);
        assert!(rel < 1e-6, "logit {got} vs oracle {want}");
    }
}

#[test]
fn identical_networks_produce_bit_identical_logits() {
    let arch = Architecture::small_cnn_sized(3, 8, 8, 4, 6, 8).unwrap();
    let a = Network::new(arch.clone(), 5).unwrap();
    let b = Network::new(arch, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..2 * 3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let batch = Tensor::new(vec![2, 3, 8, 8], data).unwrap();
    assert_eq!(
        a.forward(&batch).unwrap().data(),
        b.forward(&batch).unwrap().data()
    );
}

#[test]
fn forward_shape_mismatch_names_expected_and_got() {
    let arch = Architecture::mlp(1, 4, 4, &[4], 2).unwrap();
    let net = Network::new(arch, 0).unwrap();
    let bad = Tensor::zeros(vec![1, 1, 5, 5]);
    match net.forward(&bad) {
        Err(Error::InputShape { expected, got }) => {
            assert!(expected.contains("4"), "expected mentions dims: {expected}");
            assert!(got.contains("5"), "got mentions dims: {got}");
        }
        other => panic!("wanted shape error, got {other:?}"),
    }
}

#[test]
fn zero_logits_give_uniform_confidence() {
    let net = identity_dense_net(10);
    let x = Tensor::zeros(vec![10, 1, 1]);
    let conf = net.confidence(&x).unwrap();
    for &p in &conf {
        assert!((p - 0.1).abs() < 1e-12);
    }
    let sum: f64 = conf.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn confidence_is_shift_invariant() {
    let z = [2.0f32, -1.0, 0.5, 0.0];
    let base = softmax_f64(&z);
    for c in [-100.0f32, -3.5, 7.25, 250.0] {
        let shifted: Vec<f32> = z.iter().map(|&v| v + c).collect();
        let p = softmax_f64(&shifted);
        for (a, b) in base.iter().zip(&p) {
            assert!((a - b).abs() < 1e-9, "shift {c}: {a} vs {b}");
        }
    }
}

#[test]
fn confidence_matches_direct_formula() {
    let p = softmax_f64(&[2.0, 0.0, 0.0]);
    let e2 = (2.0f64).exp();
    let want = [e2 / (e2 + 2.0), 1.0 / (e2 + 2.0), 1.0 / (e2 + 2.0)];
    for (a, b) in p.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn predict_takes_unique_max_and_breaks_ties_low() {
    // identity dense turns the input directly into logits [0,5,0] / [3,3,0]
    let net = identity_dense_net(3);
    let x = Tensor::new(vec![3, 1, 1], vec![0.0, 5.0, 0.0]).unwrap();
    assert_eq!(net.predict(&x).unwrap(), 1);
    let tie = Tensor::new(vec![3, 1, 1], vec![3.0, 3.0, 0.0]).unwrap();
    assert_eq!(net.predict(&tie).unwrap(), 0, "ties break to lowest index");
}

#[test]
fn argmax_matches_linear_scan_on_random_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let vals: Vec<f64> = (0..17).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut best = 0;
        for (i, &v) in vals.iter().enumerate() {
            if v > vals[best] {
                best = i;
            }
        }
        assert_eq!(argmax(&vals), best);
    }
}

#[test]
fn near_converged_separable_problem_has_tiny_gradient() {
    // logits hugely favoring the true label: softmax ~ one-hot, gradient ~ 0
    let net = identity_dense_net(3);
    let mut x = Tensor::zeros(vec![1, 3, 1, 1]);
    x.data_mut()[1] = 1.0;
    let mut scaled = net.clone();
    let mut w = vec![0.0f32; 9];
    for i in 0..3 {
        w[i * 3 + i] = 60.0;
    }
    scaled
        .set_params(vec![
            Tensor::new(vec![3, 3], w).unwrap(),
            Tensor::zeros(vec![3]),
        ])
        .unwrap();
    let grads = scaled.backward(&x, &[1]).unwrap();
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    assert!(norm < 1e-6, "gradient norm {norm}");
}

#[test]
fn duplicated_batch_preserves_mean_gradient() {
    let arch = Architecture::mlp(1, 2, 2, &[5], 3).unwrap();
    let net = Network::new(arch, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample: Vec<f32> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
    let batch = Tensor::new(vec![2, 1, 2, 2], sample.clone()).unwrap();
    let mut doubled_data = sample.clone();
    doubled_data.extend_from_slice(&sample);
    let doubled = Tensor::new(vec![4, 1, 2, 2], doubled_data).unwrap();

    let g1 = net.backward(&batch, &[0, 2]).unwrap();
    let g2 = net.backward(&doubled, &[0, 2, 0, 2]).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn descriptor_round_trips() {
    for arch in [
        Architecture::small_cnn(3, 16, 16, 8).unwrap(),
        Architecture::small_cnn_sized(1, 8, 8, 4, 6, 12).unwrap(),
        Architecture::mlp(3, 16, 16, &[64, 32], 8).unwrap(),
        Architecture::mlp(1, 4, 4, &[], 2).unwrap(),
    ] {
        let parsed = Architecture::from_descriptor(arch.descriptor()).unwrap();
        assert_eq!(parsed, arch);
    }
    assert!(Architecture::from_descriptor("resnet:layers=18").is_err());
    assert!(Architecture::from_descriptor("smallcnn:c=3").is_err());
}
