//! Gradient correctness: analytic backpropagation against central finite
//! differences of an independent all-f64 oracle, across every layer type.

mod common;

use badexpert::nn::{Architecture, Network};
use badexpert::Tensor;
use common::{compare_gradients, finite_difference_gradients};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

fn random_batch(shape: [usize; 3], n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let len = n * shape.iter().product::<usize>();
    let data: Vec<f32> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    Tensor::new(full, data).unwrap()
}

fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// Pick a batch at which the loss is locally smooth: finite differences are
/// invalid across ReLU kinks and pooling argmax flips, so batches within
/// 10x the FD step of one are redrawn.
fn smooth_batch(
    net: &Network,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> (Tensor, Vec<usize>) {
    let params: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.tensor.data().iter().map(|&v| v as f64).collect())
        .collect();
    loop {
        let batch = random_batch(net.input_shape(), n, rng);
        let labels = random_labels(n, net.num_classes(), rng);
        let input: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();
        let margin = common::kink_margin(net.architecture(), &params, &input, n);
        if margin > FD_STEP * 10.0 {
            return (batch, labels);
        }
    }
}

fn check_architecture(arch: Architecture, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let net = Network::new(arch.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let (batch, labels) = smooth_batch(&net, &mut rng, 3);

        let analytic = net.backward(&batch, &labels).unwrap();
        let numeric = finite_difference_gradients(&net, &batch, &labels, FD_STEP);
        if let Some((pi, i, a, n)) = compare_gradients(&analytic, &numeric, REL_TOL, ABS_FLOOR)
        {
            panic!(
                "{} seed {seed}: param {pi} elem {i}: analytic {a} vs numeric {n}",
                arch.descriptor()
            );
        }
    }
}

#[test]
fn dense_and_flatten_gradients_match_finite_differences() {
    check_architecture(Architecture::mlp(1, 3, 3, &[], 4).unwrap(), 0..10);
}

#[test]
fn relu_mlp_gradients_match_finite_differences() {
    check_architecture(Architecture::mlp(2, 3, 3, &[7], 3).unwrap(), 10..20);
}

#[test]
fn conv_gradients_match_finite_differences() {
    // conv3x3 (pad 1) straight into the classifier head
    let arch = Architecture::small_cnn_sized(1, 4, 4, 3, 2, 2).unwrap();
    check_architecture(arch, 20..30);
}

#[test]
fn full_small_cnn_gradients_match_finite_differences() {
    // the full layer sequence at reduced width: conv-relu-pool-conv-relu-pool-flatten-dense
    let arch = Architecture::small_cnn_sized(2, 8, 8, 4, 3, 5).unwrap();
    check_architecture(arch, 30..40);
}

#[test]
fn forward_matches_oracle_logits() {
    let arch = Architecture::small_cnn_sized(2, 8, 8, 4, 3, 5).unwrap();
    let net = Network::new(arch.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let batch = random_batch(net.input_shape(), 2, &mut rng);
    let logits = net.forward(&batch).unwrap();

    let params: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.tensor.data().iter().map(|&v| v as f64).collect())
        .collect();
    let input: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();
    let oracle = common::oracle_logits(&arch, &params, &input, 2);
    for (&got, want) in logits.data().iter().zip(&oracle) {
        let rel = (got as f64 - want).abs() / want.abs().max(1e-9);
        assert!(rel < 1e-5, "logit {got} vs oracle {want}");
    }
}
