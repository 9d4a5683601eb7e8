//! Layer compute kernels. Parameters and activations are stored as `f32`;
//! every dot-product accumulates in `f64` so results carry a single rounding.

use crate::tensor::Tensor;

/// y = x W^T + b for a batch. `input` is (n, fin), `weight` (fout, fin), `bias` (fout).
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let n = input.shape()[0];
    let fin = input.shape()[1];
    let fout = weight.shape()[0];
    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * fout];
    for s in 0..n {
        let xrow = &x[s * fin..(s + 1) * fin];
        for j in 0..fout {
            let wrow = &w[j * fin..(j + 1) * fin];
            let mut acc = b[j] as f64;
            for i in 0..fin {
                acc += xrow[i] as f64 * wrow[i] as f64;
            }
            out[s * fout + j] = acc as f32;
        }
    }
    Tensor::new(vec![n, fout], out).expect("dense output shape")
}

/// Gradients of a dense layer. `grad_out` is (n, fout); returns
/// (grad_weight, grad_bias, grad_input). Sample scaling is carried by `grad_out`.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = input.shape()[0];
    let fin = input.shape()[1];
    let fout = weight.shape()[0];
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();

    let mut gw = vec![0.0f64; fout * fin];
    let mut gb = vec![0.0f64; fout];
    let mut gx = vec![0.0f64; n * fin];
    for s in 0..n {
        let xrow = &x[s * fin..(s + 1) * fin];
        for j in 0..fout {
            let gj = g[s * fout + j] as f64;
            gb[j] += gj;
            let wrow = &w[j * fin..(j + 1) * fin];
            let gwrow = &mut gw[j * fin..(j + 1) * fin];
            for i in 0..fin {
                gwrow[i] += gj * xrow[i] as f64;
                gx[s * fin + i] += gj * wrow[i] as f64;
            }
        }
    }
    (
        Tensor::new(vec![fout, fin], gw.iter().map(|&v| v as f32).collect()).unwrap(),
        Tensor::new(vec![fout], gb.iter().map(|&v| v as f32).collect()).unwrap(),
        Tensor::new(vec![n, fin], gx.iter().map(|&v| v as f32).collect()).unwrap(),
    )
}

/// 2-D convolution, stride 1. `input` (n, cin, h, w), `weight` (cout, cin, k, k).
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Tensor {
    let (n, cin, h, w) = dims4(input);
    let cout = weight.shape()[0];
    let k = weight.shape()[2];
    let (oh, ow) = conv_output_hw(h, w, k, padding);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * cout * oh * ow];

    for s in 0..n {
        for oc in 0..cout {
            let out_base = (s * cout + oc) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc] as f64;
                    for ic in 0..cin {
                        let in_base = (s * cin + ic) * h * w;
                        let w_base = ((oc * cin + ic) * k) * k;
                        for ky in 0..k {
                            let iy = (oy + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = in_base + iy as usize * w;
                            for kx in 0..k {
                                let ix = (ox + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[row + ix as usize] as f64
                                    * wt[w_base + ky * k + kx] as f64;
                            }
                        }
                    }
                    out[out_base + oy * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).expect("conv output shape")
}

/// Gradients of a convolution. Returns (grad_weight, grad_bias, grad_input).
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = dims4(input);
    let cout = weight.shape()[0];
    let k = weight.shape()[2];
    let (oh, ow) = conv_output_hw(h, w, k, padding);
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();

    let mut gw = vec![0.0f64; cout * cin * k * k];
    let mut gb = vec![0.0f64; cout];
    let mut gx = vec![0.0f64; n * cin * h * w];

    for s in 0..n {
        for oc in 0..cout {
            let g_base = (s * cout + oc) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[g_base + oy * ow + ox] as f64;
                    if go == 0.0 {
                        continue;
                    }
                    gb[oc] += go;
                    for ic in 0..cin {
                        let in_base = (s * cin + ic) * h * w;
                        let w_base = ((oc * cin + ic) * k) * k;
                        for ky in 0..k {
                            let iy = (oy + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = in_base + iy as usize * w;
                            for kx in 0..k {
                                let ix = (ox + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = row + ix as usize;
                                let wi = w_base + ky * k + kx;
                                gw[wi] += go * x[xi] as f64;
                                gx[xi] += go * wt[wi] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(
            vec![cout, cin, k, k],
            gw.iter().map(|&v| v as f32).collect(),
        )
        .unwrap(),
        Tensor::new(vec![cout], gb.iter().map(|&v| v as f32).collect()).unwrap(),
        Tensor::new(
            vec![n, cin, h, w],
            gx.iter().map(|&v| v as f32).collect(),
        )
        .unwrap(),
    )
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).unwrap()
}

/// ReLU passes gradient where the pre-activation input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).unwrap()
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output element, the flat input index of
/// its maximum (ties go to the first element scanned).
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = dims4(input);
    let oh = h / 2;
    let ow = w / 2;
    let x = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];

    for s in 0..n {
        for ch in 0..c {
            let in_base = (s * c + ch) * h * w;
            let out_base = (s * c + ch) * oh * ow;
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = in_base + (py * 2 + dy) * w + (px * 2 + dx);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + py * ow + px] = best;
                    argmax[out_base + py * ow + px] = best_idx as u32;
                }
            }
        }
    }
    (
        Tensor::new(vec![n, c, oh, ow], out).unwrap(),
        argmax,
    )
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let mut gx = vec![0.0f32; input_shape.iter().product()];
    for (gi, &src) in grad_out.data().iter().zip(argmax) {
        gx[src as usize] += gi;
    }
    Tensor::new(input_shape.to_vec(), gx).unwrap()
}

pub fn conv_output_hw(h: usize, w: usize, k: usize, padding: usize) -> (usize, usize) {
    (h + 2 * padding - k + 1, w + 2 * padding - k + 1)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
