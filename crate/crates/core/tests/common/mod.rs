//! Test-only oracles, independent of the library's compute path: a naive
//! all-f64 network evaluation used for finite-difference gradient checks,
//! and a quadratic-time AUROC pair counter.

use badexpert::nn::{Architecture, LayerSpec, Network};
use badexpert::Tensor;

/// Naive f64 forward pass over `arch` with explicit f64 parameters.
/// `input` is a flattened (n, c, h, w) batch.
pub fn oracle_logits(
    arch: &Architecture,
    params: &[Vec<f64>],
    input: &[f64],
    n: usize,
) -> Vec<f64> {
    let mut act = input.to_vec();
    let mut shape = arch.input_shape.to_vec();
    let mut pi = 0usize;
    for layer in &arch.layers {
        match layer {
            LayerSpec::Dense { inputs, outputs } => {
                let w = &params[pi];
                let b = &params[pi + 1];
                pi += 2;
                let mut out = vec![0.0f64; n * outputs];
                for s in 0..n {
                    for j in 0..*outputs {
                        let mut acc = b[j];
                        for i in 0..*inputs {
                            acc += act[s * inputs + i] * w[j * inputs + i];
                        }
                        out[s * outputs + j] = acc;
                    }
                }
                act = out;
                shape = vec![*outputs];
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let (h, w) = (shape[1], shape[2]);
                let oh = h + 2 * padding - kernel + 1;
                let ow = w + 2 * padding - kernel + 1;
                let wt = &params[pi];
                let b = &params[pi + 1];
                pi += 2;
                let mut out = vec![0.0f64; n * out_channels * oh * ow];
                for s in 0..n {
                    for oc in 0..*out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[oc];
                                for ic in 0..*in_channels {
                                    for ky in 0..*kernel {
                                        for kx in 0..*kernel {
                                            let iy =
                                                (oy + ky) as isize - *padding as isize;
                                            let ix =
                                                (ox + kx) as isize - *padding as isize;
                                            if iy < 0
                                                || iy >= h as isize
                                                || ix < 0
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            let xi = ((s * in_channels + ic) * h
                                                + iy as usize)
                                                * w
                                                + ix as usize;
                                            let wi = ((oc * in_channels + ic) * kernel
                                                + ky)
                                                * kernel
                                                + kx;
                                            acc += act[xi] * wt[wi];
                                        }
                                    }
                                }
                                out[((s * out_channels + oc) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                act = out;
                shape = vec![*out_channels, oh, ow];
            }
            LayerSpec::Relu => {
                for v in &mut act {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerSpec::MaxPool2 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0f64; n * c * oh * ow];
                for s in 0..n {
                    for ch in 0..c {
                        for py in 0..oh {
                            for px in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = act[((s * c + ch) * h + py * 2 + dy) * w
                                            + px * 2
                                            + dx];
                                        if v > best {
                                            best = v;
                                        }
                                    }
                                }
                                out[((s * c + ch) * oh + py) * ow + px] = best;
                            }
                        }
                    }
                }
                act = out;
                shape = vec![c, oh, ow];
            }
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
            }
        }
    }
    act
}

/// Distance of the evaluation point from the nearest non-differentiability:
/// the smallest |pre-ReLU activation| and the smallest top-2 gap inside any
/// pooling window. Finite differences are only trustworthy when this margin
/// comfortably exceeds the step size.
pub fn kink_margin(arch: &Architecture, params: &[Vec<f64>], input: &[f64], n: usize) -> f64 {
    let mut margin = f64::INFINITY;
    let mut act = input.to_vec();
    let mut shape = arch.input_shape.to_vec();
    let mut pi = 0usize;
    for layer in &arch.layers {
        match layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                // replay just this layer via a single-layer walk
                let sub = partial_forward(layer, &params[pi], &params[pi + 1], &act, &shape, n);
                act = sub.0;
                shape = sub.1;
                pi += 2;
            }
            LayerSpec::Relu => {
                for &v in &act {
                    margin = margin.min(v.abs());
                }
                for v in &mut act {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerSpec::MaxPool2 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0f64; n * c * oh * ow];
                for s in 0..n {
                    for ch in 0..c {
                        for py in 0..oh {
                            for px in 0..ow {
                                let mut window = [0.0f64; 4];
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        window[dy * 2 + dx] = act
                                            [((s * c + ch) * h + py * 2 + dy) * w + px * 2 + dx];
                                    }
                                }
                                window.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                // ties among exact zeros are ReLU-clamped values;
                                // the ReLU margin already guards those
                                if window[0] != 0.0 || window[1] != 0.0 {
                                    margin = margin.min(window[0] - window[1]);
                                }
                                out[((s * c + ch) * oh + py) * ow + px] = window[0];
                            }
                        }
                    }
                }
                act = out;
                shape = vec![c, oh, ow];
            }
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
            }
        }
    }
    margin
}

fn partial_forward(
    layer: &LayerSpec,
    weight: &[f64],
    bias: &[f64],
    act: &[f64],
    shape: &[usize],
    n: usize,
) -> (Vec<f64>, Vec<usize>) {
    match layer {
        LayerSpec::Dense { inputs, outputs } => {
            let mut out = vec![0.0f64; n * outputs];
            for s in 0..n {
                for j in 0..*outputs {
                    let mut acc = bias[j];
                    for i in 0..*inputs {
                        acc += act[s * inputs + i] * weight[j * inputs + i];
                    }
                    out[s * outputs + j] = acc;
                }
            }
            (out, vec![*outputs])
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
        } => {
            let (h, w) = (shape[1], shape[2]);
            let oh = h + 2 * padding - kernel + 1;
            let ow = w + 2 * padding - kernel + 1;
            let mut out = vec![0.0f64; n * out_channels * oh * ow];
            for s in 0..n {
                for oc in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[oc];
                            for ic in 0..*in_channels {
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        let iy = (oy + ky) as isize - *padding as isize;
                                        let ix = (ox + kx) as isize - *padding as isize;
                                        if iy < 0
                                            || iy >= h as isize
                                            || ix < 0
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((s * in_channels + ic) * h + iy as usize) * w
                                            + ix as usize;
                                        let wi =
                                            ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                        acc += act[xi] * weight[wi];
                                    }
                                }
                            }
                            out[((s * out_channels + oc) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            (out, vec![*out_channels, oh, ow])
        }
        _ => unreachable!("partial_forward only handles parameterized layers"),
    }
}

/// Mean cross-entropy of the oracle forward, all in f64.
pub fn oracle_loss(
    arch: &Architecture,
    params: &[Vec<f64>],
    input: &[f64],
    labels: &[usize],
) -> f64 {
    let n = labels.len();
    let classes = arch.num_classes;
    let logits = oracle_logits(arch, params, input, n);
    let mut total = 0.0f64;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / n as f64
}

/// Central finite differences of the oracle loss with respect to every
/// parameter, step `h`, evaluated at the network's current (f32) parameters.
pub fn finite_difference_gradients(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
) -> Vec<Vec<f64>> {
    let arch = net.architecture();
    let mut params: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.tensor.data().iter().map(|&v| v as f64).collect())
        .collect();
    let input: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();
    let n = labels.len();
    assert_eq!(batch.shape()[0], n);

    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = vec![0.0f64; params[pi].len()];
        for i in 0..params[pi].len() {
            let orig = params[pi][i];
            params[pi][i] = orig + h;
            let up = oracle_loss(arch, &params, &input, labels);
            params[pi][i] = orig - h;
            let down = oracle_loss(arch, &params, &input, labels);
            params[pi][i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Analytic-vs-numeric comparison: relative error 1e-4 with a small absolute
/// floor for near-zero gradients. Returns the worst offender, if any.
pub fn compare_gradients(
    analytic: &[Tensor],
    numeric: &[Vec<f64>],
    rel_tol: f64,
    abs_floor: f64,
) -> Option<(usize, usize, f64, f64)> {
    let mut worst: Option<(usize, usize, f64, f64)> = None;
    let mut worst_excess = 0.0f64;
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&av, &nv)) in a.data().iter().zip(n).enumerate() {
            let av = av as f64;
            let diff = (av - nv).abs();
            let allowed = rel_tol * av.abs().max(nv.abs()) + abs_floor;
            if diff > allowed && diff - allowed > worst_excess {
                worst_excess = diff - allowed;
                worst = Some((pi, i, av, nv));
            }
        }
    }
    worst
}

/// Quadratic-time Mann-Whitney pair count (ties at 0.5); the slow reference
/// the fast implementation is checked against.
pub fn auroc_pair_count_oracle(clean: &[f64], backdoor: &[f64]) -> f64 {
    let mut won = 0.0f64;
    for &b in backdoor {
        for &c in clean {
            if b < c {
                won += 1.0;
            } else if b == c {
                won += 0.5;
            }
        }
    }
    won / (clean.len() as f64 * backdoor.len() as f64)
}

/// Sorting-based order-statistic oracle for threshold calibration: the
/// largest candidate score whose inclusive rejection count fits the budget.
pub fn calibration_oracle(scores: &[f64], target_fpr: f64) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let budget = (target_fpr * sorted.len() as f64).floor() as usize;
    let mut best = None;
    for &candidate in &sorted {
        let count = sorted.iter().filter(|&&v| v <= candidate).count();
        if count <= budget {
            best = Some(candidate);
        }
    }
    best
}
