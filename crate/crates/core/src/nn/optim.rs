//! SGD-with-momentum and Adam parameter updates.

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer kind plus per-parameter moment tensors.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd {
        params: SgdParams,
        momentum_buffers: Vec<Tensor>,
    },
    Adam {
        params: AdamParams,
        step_count: u64,
        first_moments: Vec<Tensor>,
        second_moments: Vec<Tensor>,
    },
}

impl OptimizerState {
    pub fn sgd(net: &Network, params: SgdParams) -> Self {
        OptimizerState::Sgd {
            params,
            momentum_buffers: zero_like(net),
        }
    }

    pub fn adam(net: &Network, params: AdamParams) -> Self {
        OptimizerState::Adam {
            params,
            step_count: 0,
            first_moments: zero_like(net),
            second_moments: zero_like(net),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            OptimizerState::Sgd { params, .. } => params.lr = lr,
            OptimizerState::Adam { params, .. } => params.lr = lr,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerState::Sgd { params, .. } => params.lr,
            OptimizerState::Adam { params, .. } => params.lr,
        }
    }
}

fn zero_like(net: &Network) -> Vec<Tensor> {
    net.params()
        .iter()
        .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
        .collect()
}

fn check_grads(net: &Network, grads: &[Tensor]) -> Result<()> {
    if grads.len() != net.params().len() {
        return Err(Error::InputShape {
            expected: format!("{} gradient tensors", net.params().len()),
            got: format!("{}", grads.len()),
        });
    }
    for (p, g) in net.params().iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::InputShape {
                expected: format!("{:?} for {}", p.tensor.shape(), p.name),
                got: format!("{:?}", g.shape()),
            });
        }
    }
    Ok(())
}

/// Apply one optimizer step in place.
///
/// SGD: `m_t = mu * m_{t-1} + g_t`, `theta -= lr * m_t + lr * wd * theta`
/// (decoupled weight decay). Adam: standard bias-corrected moments.
pub fn step(net: &mut Network, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    check_grads(net, grads)?;
    match state {
        OptimizerState::Sgd {
            params,
            momentum_buffers,
        } => {
            let lr = params.lr;
            let mu = params.momentum;
            let wd = params.weight_decay;
            for ((p, g), m) in net
                .params_mut()
                .iter_mut()
                .zip(grads)
                .zip(momentum_buffers)
            {
                let theta = p.tensor.data_mut();
                let mdata = m.data_mut();
                for i in 0..theta.len() {
                    let mt = mu * mdata[i] as f64 + g.data()[i] as f64;
                    mdata[i] = mt as f32;
                    let update = lr * mt + lr * wd * theta[i] as f64;
                    theta[i] = (theta[i] as f64 - update) as f32;
                }
            }
        }
        OptimizerState::Adam {
            params,
            step_count,
            first_moments,
            second_moments,
        } => {
            *step_count += 1;
            let t = *step_count as f64;
            let b1 = params.beta1;
            let b2 = params.beta2;
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            for (((p, g), m), v) in net
                .params_mut()
                .iter_mut()
                .zip(grads)
                .zip(first_moments)
                .zip(second_moments)
            {
                let theta = p.tensor.data_mut();
                let md = m.data_mut();
                let vd = v.data_mut();
                for i in 0..theta.len() {
                    let gi = g.data()[i] as f64;
                    let mt = b1 * md[i] as f64 + (1.0 - b1) * gi;
                    let vt = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
                    md[i] = mt as f32;
                    vd[i] = vt as f32;
                    let update = params.lr * (mt / bc1) / ((vt / bc2).sqrt() + params.epsilon);
                    theta[i] = (theta[i] as f64 - update) as f32;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn scalar_net() -> Network {
        // single dense layer 1->2 gives two weight entries and two biases
        let arch = Architecture::mlp(1, 1, 1, &[], 2).unwrap();
        Network::new(arch, 7).unwrap()
    }

    fn grads_like(net: &Network, value: f32) -> Vec<Tensor> {
        net.params()
            .iter()
            .map(|p| Tensor::filled(p.tensor.shape().to_vec(), value))
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut net = scalar_net();
        let before = net.clone();
        let grads = grads_like(&net, 2.0);
        let mut sgd = OptimizerState::sgd(
            &net,
            SgdParams {
                lr: 0.0,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
        );
        step(&mut net, &grads, &mut sgd).unwrap();
        assert_eq!(net.params(), before.params());

        let mut adam = OptimizerState::adam(&net, AdamParams::with_lr(0.0));
        step(&mut net, &grads, &mut adam).unwrap();
        assert_eq!(net.params(), before.params());
    }

    #[test]
    fn plain_sgd_one_step_arithmetic() {
        // theta = 1, g = 2, lr = 0.1, no momentum/decay -> theta = 0.8
        let mut net = scalar_net();
        for p in net.params_mut() {
            p.tensor.data_mut().fill(1.0);
        }
        let grads = grads_like(&net, 2.0);
        let mut sgd = OptimizerState::sgd(
            &net,
            SgdParams {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        step(&mut net, &grads, &mut sgd).unwrap();
        for p in net.params() {
            for &v in p.tensor.data() {
                assert!((v - 0.8).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn sgd_momentum_and_decoupled_decay() {
        let mut net = scalar_net();
        for p in net.params_mut() {
            p.tensor.data_mut().fill(1.0);
        }
        let grads = grads_like(&net, 2.0);
        let mut sgd = OptimizerState::sgd(
            &net,
            SgdParams {
                lr: 0.1,
                momentum: 0.5,
                weight_decay: 0.01,
            },
        );
        // step 1: m = 2, theta = 1 - 0.1*2 - 0.1*0.01*1 = 0.799
        step(&mut net, &grads, &mut sgd).unwrap();
        let after1 = net.params()[0].tensor.data()[0] as f64;
        assert!((after1 - 0.799).abs() < 1e-6);
        // step 2: m = 0.5*2 + 2 = 3, theta = 0.799 - 0.3 - 0.001*0.799
        step(&mut net, &grads, &mut sgd).unwrap();
        let after2 = net.params()[0].tensor.data()[0] as f64;
        assert!((after2 - (0.799 - 0.3 - 0.001 * 0.799)).abs() < 1e-6);
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        // theta=1, g=2, lr=0.1, defaults: m=0.2, v=0.004, mhat=2, vhat=4,
        // update = 0.1 * 2 / (2 + 1e-8) ~= 0.1 -> theta ~= 0.9
        let mut net = scalar_net();
        for p in net.params_mut() {
            p.tensor.data_mut().fill(1.0);
        }
        let grads = grads_like(&net, 2.0);
        let mut adam = OptimizerState::adam(&net, AdamParams::with_lr(0.1));
        step(&mut net, &grads, &mut adam).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        for p in net.params() {
            for &v in p.tensor.data() {
                assert!((v as f64 - expected).abs() < 1e-7, "{v} vs {expected}");
            }
        }
    }

    #[test]
    fn mismatched_gradient_shapes_are_rejected() {
        let mut net = scalar_net();
        let bad = vec![Tensor::zeros(vec![1])];
        let mut sgd = OptimizerState::sgd(
            &net,
            SgdParams {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        assert!(step(&mut net, &bad, &mut sgd).is_err());
    }
}
