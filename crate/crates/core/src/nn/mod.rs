//! Minimal feed-forward/convolutional classifier with manual backpropagation.
//!
//! Networks are plain values: layer descriptors plus named parameter tensors.
//! Two networks with identical descriptors and parameters produce bit-identical
//! logits under single-threaded evaluation.

mod layers;
mod loss;
mod optim;
mod train;

pub use loss::{cross_entropy, cross_entropy_soft, logit_gradient, logit_gradient_soft};
pub use optim::{step, AdamParams, OptimizerState, SgdParams};
pub(crate) use train::augment_batch;
pub use train::{dataset_loss, train, Augmentation, TrainConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One layer of the fixed layer vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
}

/// An ordered layer stack with a declared input shape and class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: [usize; 3], // (channels, height, width)
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    descriptor: String,
}

impl Architecture {
    /// conv3x3(16)-ReLU-maxpool2-conv3x3(32)-ReLU-maxpool2-flatten-dense(C).
    pub fn small_cnn(channels: usize, height: usize, width: usize, classes: usize) -> Result<Self> {
        Self::small_cnn_sized(channels, height, width, classes, 16, 32)
    }

    /// SmallCNN layer sequence with configurable channel widths (the reduced
    /// variants keep gradient checks fast).
    pub fn small_cnn_sized(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        c1: usize,
        c2: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let (h1, w1) = (height / 2, width / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        if h2 == 0 || w2 == 0 {
            return Err(Error::Config(format!(
                "input {height}x{width} too small for two 2x2 pools"
            )));
        }
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels: channels,
                out_channels: c1,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d {
                in_channels: c1,
                out_channels: c2,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: c2 * h2 * w2,
                outputs: classes,
            },
        ];
        let descriptor =
            format!("smallcnn:c={channels},h={height},w={width},c1={c1},c2={c2},classes={classes}");
        Ok(Architecture {
            input_shape: [channels, height, width],
            layers,
            num_classes: classes,
            descriptor,
        })
    }

    /// flatten-dense(hidden……)-ReLU-dense(C); the fastest option for tests.
    pub fn mlp(
        channels: usize,
        height: usize,
        width: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let mut layers = vec![LayerSpec::Flatten];
        let mut inputs = channels * height * width;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs,
                outputs: h,
            });
            layers.push(LayerSpec::Relu);
            inputs = h;
        }
        layers.push(LayerSpec::Dense {
            inputs,
            outputs: classes,
        });
        let hidden_txt = hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let descriptor =
            format!("mlp:c={channels},h={height},w={width},hidden={hidden_txt},classes={classes}");
        Ok(Architecture {
            input_shape: [channels, height, width],
            layers,
            num_classes: classes,
            descriptor,
        })
    }

    /// Text form used in checkpoints and configs, e.g.
    /// `smallcnn:c=3,h=16,w=16,c1=16,c2=32,classes=8`.
    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let err = |detail: String| Error::Parse {
            what: "architecture descriptor".into(),
            detail,
        };
        let (kind, rest) = text
            .split_once(':')
            .ok_or_else(|| err(format!("missing ':' in {text:?}")))?;
        let mut fields = std::collections::BTreeMap::new();
        for pair in rest.split(',') {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| err(format!("bad field {pair:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| err(format!("missing field {key:?}")))?
                .parse()
                .map_err(|_| err(format!("field {key:?} is not an integer")))
        };
        match kind {
            "smallcnn" => Architecture::small_cnn_sized(
                get("c")?,
                get("h")?,
                get("w")?,
                get("classes")?,
                get("c1")?,
                get("c2")?,
            ),
            "mlp" => {
                let hidden_txt = fields
                    .get("hidden")
                    .ok_or_else(|| err("missing field \"hidden\"".into()))?;
                let hidden: Vec<usize> = if hidden_txt.is_empty() {
                    vec![]
                } else {
                    hidden_txt
                        .split('x')
                        .map(|p| {
                            p.parse()
                                .map_err(|_| err(format!("bad hidden width {p:?}")))
                        })
                        .collect::<Result<_>>()?
                };
                Architecture::mlp(get("c")?, get("h")?, get("w")?, &hidden, get("classes")?)
            }
            other => Err(err(format!("unknown architecture kind {other:?}"))),
        }
    }

    /// Shape of each layer's input, followed by the output shape (sans batch dim).
    fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if cur != vec![*inputs] {
                        return Err(Error::Config(format!(
                            "layer {i}: dense expects [{inputs}], got {cur:?}"
                        )));
                    }
                    vec![*outputs]
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    if cur.len() != 3 || cur[0] != *in_channels {
                        return Err(Error::Config(format!(
                            "layer {i}: conv expects {in_channels} channels, got {cur:?}"
                        )));
                    }
                    let (oh, ow) = layers::conv_output_hw(cur[1], cur[2], *kernel, *padding);
                    vec![*out_channels, oh, ow]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool2 => {
                    if cur.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {i}: maxpool expects 3-d input, got {cur:?}"
                        )));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out != &vec![self.num_classes] {
            return Err(Error::Config(format!(
                "network output shape {out:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(shapes)
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A classifier: architecture plus parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<Param>,
    /// param indices (weight, bias) per layer, None for parameterless layers
    layer_params: Vec<Option<(usize, usize)>>,
}

impl Network {
    /// Xavier-uniform initialisation, deterministic in `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.shape_chain()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layer_params = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                    let w: Vec<f32> = (0..outputs * inputs)
                        .map(|_| (rng.gen_range(-limit..limit)) as f32)
                        .collect();
                    let wi = params.len();
                    params.push(Param {
                        name: format!("layer{i}.weight"),
                        tensor: Tensor::new(vec![*outputs, *inputs], w)?,
                    });
                    params.push(Param {
                        name: format!("layer{i}.bias"),
                        tensor: Tensor::zeros(vec![*outputs]),
                    });
                    layer_params.push(Some((wi, wi + 1)));
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let w: Vec<f32> = (0..out_channels * in_channels * kernel * kernel)
                        .map(|_| (rng.gen_range(-limit..limit)) as f32)
                        .collect();
                    let wi = params.len();
                    params.push(Param {
                        name: format!("layer{i}.weight"),
                        tensor: Tensor::new(
                            vec![*out_channels, *in_channels, *kernel, *kernel],
                            w,
                        )?,
                    });
                    params.push(Param {
                        name: format!("layer{i}.bias"),
                        tensor: Tensor::zeros(vec![*out_channels]),
                    });
                    layer_params.push(Some((wi, wi + 1)));
                }
                _ => layer_params.push(None),
            }
        }
        Ok(Network {
            arch,
            params,
            layer_params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn set_params(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::InputShape {
                expected: format!("{} parameter tensors", self.params.len()),
                got: format!("{}", tensors.len()),
            });
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::InputShape {
                    expected: format!("{:?} for {}", p.tensor.shape(), p.name),
                    got: format!("{:?}", t.shape()),
                });
            }
            p.tensor = t;
        }
        Ok(())
    }

    fn check_batch_shape(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let [c, h, w] = self.arch.input_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::InputShape {
                expected: format!("(n, {c}, {h}, {w})"),
                got: format!("{s:?}"),
            });
        }
        Ok(())
    }

    /// Raw class scores for a batch of shape (n, c, h, w): returns (n, C).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.forward_trace(batch)?;
        Ok(logits)
    }

    /// Forward pass retaining per-layer activations for backpropagation.
    pub fn forward_trace(&self, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.check_batch_shape(batch)?;
        let n = batch.shape()[0];
        let mut activations: Vec<Tensor> = vec![batch.clone()];
        let mut pool_argmax: Vec<Option<Vec<u32>>> = Vec::with_capacity(self.arch.layers.len());
        for (li, layer) in self.arch.layers.iter().enumerate() {
            let x = activations.last().unwrap();
            let (y, arg) = match layer {
                LayerSpec::Dense { .. } => {
                    let (wi, bi) = self.layer_params[li].unwrap();
                    (
                        layers::dense_forward(x, &self.params[wi].tensor, &self.params[bi].tensor),
                        None,
                    )
                }
                LayerSpec::Conv2d { padding, .. } => {
                    let (wi, bi) = self.layer_params[li].unwrap();
                    (
                        layers::conv2d_forward(
                            x,
                            &self.params[wi].tensor,
                            &self.params[bi].tensor,
                            *padding,
                        ),
                        None,
                    )
                }
                LayerSpec::Relu => (layers::relu_forward(x), None),
                LayerSpec::MaxPool2 => {
                    let (y, arg) = layers::maxpool2_forward(x);
                    (y, Some(arg))
                }
                LayerSpec::Flatten => {
                    let flat: usize = x.shape()[1..].iter().product();
                    (x.reshaped(vec![n, flat])?, None)
                }
            };
            pool_argmax.push(arg);
            activations.push(y);
        }
        let logits = activations.last().unwrap().clone();
        logits.check_finite("forward logits")?;
        Ok((logits, ForwardTrace {
            activations,
            pool_argmax,
        }))
    }

    /// Backpropagate `logit_grads` (n, C) through a recorded trace. Returns
    /// per-parameter gradients (matching `params` order) and the gradient with
    /// respect to the input batch.
    pub fn backward_from_logits(
        &self,
        trace: &ForwardTrace,
        logit_grads: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mut grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect();
        let mut g = logit_grads.clone();
        for (li, layer) in self.arch.layers.iter().enumerate().rev() {
            let x = &trace.activations[li];
            g = match layer {
                LayerSpec::Dense { .. } => {
                    let (wi, bi) = self.layer_params[li].unwrap();
                    let (gw, gb, gx) = layers::dense_backward(x, &self.params[wi].tensor, &g);
                    grads[wi] = gw;
                    grads[bi] = gb;
                    gx
                }
                LayerSpec::Conv2d { padding, .. } => {
                    let (wi, bi) = self.layer_params[li].unwrap();
                    let (gw, gb, gx) =
                        layers::conv2d_backward(x, &self.params[wi].tensor, &g, *padding);
                    grads[wi] = gw;
                    grads[bi] = gb;
                    gx
                }
                LayerSpec::Relu => layers::relu_backward(x, &g),
                LayerSpec::MaxPool2 => layers::maxpool2_backward(
                    x.shape(),
                    trace.pool_argmax[li].as_ref().unwrap(),
                    &g,
                ),
                LayerSpec::Flatten => g.reshaped(x.shape().to_vec())?,
            };
        }
        for gr in &grads {
            gr.check_finite("parameter gradient")?;
        }
        Ok((grads, g))
    }

    /// Mean cross-entropy gradients over a labeled batch.
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
        let (logits, trace) = self.forward_trace(batch)?;
        let lg = logit_gradient(&logits, labels, self.num_classes())?;
        let (grads, _) = self.backward_from_logits(&trace, &lg)?;
        Ok(grads)
    }

    /// Softmax confidences for a single input of the network's input shape.
    /// Computed from max-shifted logits; entries sum to 1 within 1e-9.
    pub fn confidence(&self, x: &Tensor) -> Result<Vec<f64>> {
        let [c, h, w] = self.arch.input_shape;
        if x.shape() != [c, h, w] {
            return Err(Error::InputShape {
                expected: format!("({c}, {h}, {w})"),
                got: format!("{:?}", x.shape()),
            });
        }
        let batch = x.reshaped(vec![1, c, h, w])?;
        let logits = self.forward(&batch)?;
        Ok(softmax_f64(logits.data()))
    }

    /// Predicted class index (0-based). Ties break to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let conf = self.confidence(x)?;
        Ok(argmax(&conf))
    }

    /// Predictions for a whole batch.
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        let c = self.num_classes();
        Ok(logits
            .data()
            .chunks_exact(c)
            .map(|row| argmax_f32(row))
            .collect())
    }
}

/// Per-layer activations recorded by `forward_trace`.
pub struct ForwardTrace {
    /// activations[i] feeds layer i; the last entry is the logits
    activations: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<u32>>>,
}

/// Numerically shifted softmax in f64.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Lowest-index argmax (strict > keeps ties on the first maximum).
pub fn argmax(values: &[f64]) -> usize {
    let mut idx = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[idx] {
            idx = i;
        }
    }
    idx
}

fn argmax_f32(values: &[f32]) -> usize {
    let mut idx = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[idx] {
            idx = i;
        }
    }
    idx
}

#[cfg(test)]
mod tests;
