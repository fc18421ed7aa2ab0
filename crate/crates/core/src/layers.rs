//! Sequential layers with analytic backward passes.
//!
//! A [`Layer`] is immutable once built. Training-mode forwards return a
//! [`LayerCache`] that the caller owns and hands back to [`Layer::backward`];
//! evaluation-mode forwards never allocate one.

use indexmap::IndexMap;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Trainable tensors of one layer. Parameter names are `<layer>.weight` and
/// `<layer>.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Gradients keyed by parameter name, in parameter enumeration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T = f32> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        Self {
            grads: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.grads.contains_key(&name) {
            return Err(Error::Alignment(format!("duplicate gradient for {name}")));
        }
        self.grads.insert(name, grad);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    /// Move every gradient of `other` into `self`.
    pub fn extend(&mut self, other: GradientSet<T>) -> Result<()> {
        for (name, grad) in other.grads {
            self.insert(name, grad)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => Some(vec![out_channels, in_channels, kernel_size, kernel_size]),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![in_features, out_features]),
            _ => None,
        }
    }

    fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            LayerKind::Linear { out_features, .. } => Some(out_features),
            _ => None,
        }
    }

    fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                kernel_size,
                ..
            } => Some(in_channels * kernel_size * kernel_size),
            LayerKind::Linear { in_features, .. } => Some(in_features),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.weight_shape().is_some()
    }
}

/// Draw fresh parameters: weights uniform on `[-sqrt(1/fan_in), sqrt(1/fan_in)]`
/// from a ChaCha stream seeded by `seed`, biases zero. Parameter-free layers
/// yield `None`.
pub fn init_params<T: Scalar>(name: &str, kind: &LayerKind, seed: u64) -> Option<LayerParams<T>> {
    let shape = kind.weight_shape()?;
    let fan_in = kind.fan_in()? as f64;
    let bound = (1.0 / fan_in).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = Tensor::from_fn(&shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
        .expect("layer shapes are positive");
    let bias = kind
        .bias_len()
        .map(|n| Tensor::zeros(&[n]).expect("layer shapes are positive"));
    Some(LayerParams {
        name: name.to_string(),
        weight,
        bias,
    })
}

/// Whatever the backward pass of one layer needs from its forward call.
#[derive(Debug, Clone)]
pub enum LayerCache<T = f32> {
    Conv2d {
        input: Tensor<T>,
    },
    Linear {
        input: Tensor<T>,
    },
    Relu {
        input: Tensor<T>,
    },
    MaxPool2d {
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

impl<T> LayerCache<T> {
    fn kind_name(&self) -> &'static str {
        match self {
            LayerCache::Conv2d { .. } => "conv2d",
            LayerCache::Linear { .. } => "linear",
            LayerCache::Relu { .. } => "relu",
            LayerCache::MaxPool2d { .. } => "maxpool2d",
            LayerCache::Flatten { .. } => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    name: String,
    kind: LayerKind,
    params: Option<LayerParams<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Build a layer with freshly initialized parameters.
    pub fn new(name: impl Into<String>, kind: LayerKind, seed: u64) -> Self {
        let name = name.into();
        let params = init_params(&name, &kind, seed);
        Self { name, kind, params }
    }

    /// Build a layer around existing parameter tensors, checking their shapes.
    pub fn with_params(
        name: impl Into<String>,
        kind: LayerKind,
        weight: Option<Tensor<T>>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        let name = name.into();
        let params = match (kind.weight_shape(), weight) {
            (None, None) => None,
            (None, Some(_)) => {
                return Err(Error::Alignment(format!(
                    "layer {name} has no parameters but a weight was given"
                )))
            }
            (Some(shape), None) => {
                return Err(Error::Alignment(format!(
                    "layer {name} needs a weight of shape {shape:?}"
                )))
            }
            (Some(shape), Some(w)) => {
                if w.shape() != shape.as_slice() {
                    return Err(Error::Alignment(format!(
                        "layer {name}: weight shape {:?}, expected {shape:?}",
                        w.shape()
                    )));
                }
                let n = kind.bias_len().expect("parametrized layers have a bias");
                let b = bias.ok_or_else(|| {
                    Error::Alignment(format!("layer {name} needs a bias of shape [{n}]"))
                })?;
                if b.shape() != [n] {
                    return Err(Error::Alignment(format!(
                        "layer {name}: bias shape {:?}, expected [{n}]",
                        b.shape()
                    )));
                }
                Some(LayerParams {
                    name: name.clone(),
                    weight: w,
                    bias: Some(b),
                })
            }
        };
        Ok(Self { name, kind, params })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn params(&self) -> Option<&LayerParams<T>> {
        self.params.as_ref()
    }

    pub(crate) fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        self.params.as_mut()
    }

    fn weight(&self) -> &Tensor<T> {
        &self.params.as_ref().expect("parametrized layer").weight
    }

    fn bias(&self) -> &Tensor<T> {
        self.params
            .as_ref()
            .and_then(|p| p.bias.as_ref())
            .expect("parametrized layer")
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let op = format!("layer {}", self.name);
        match self.kind {
            LayerKind::Conv2d { in_channels, .. } => {
                input.expect_rank(4, &op, "input [N, C, H, W]")?;
                if input.shape()[1] != in_channels {
                    return Err(Error::dim(
                        op,
                        format!(
                            "channel axis (1) is {}, layer expects {in_channels}",
                            input.shape()[1]
                        ),
                    ));
                }
            }
            LayerKind::Linear { in_features, .. } => {
                input.expect_rank(2, &op, "input [N, features]")?;
                if input.shape()[1] != in_features {
                    return Err(Error::dim(
                        op,
                        format!(
                            "feature axis (1) is {}, layer expects {in_features}",
                            input.shape()[1]
                        ),
                    ));
                }
            }
            LayerKind::MaxPool2d { .. } => input.expect_rank(4, &op, "input [N, C, H, W]")?,
            LayerKind::Flatten => {
                if input.rank() < 2 {
                    return Err(Error::dim(
                        op,
                        format!("input needs a batch axis, got shape {:?}", input.shape()),
                    ));
                }
            }
            LayerKind::Relu => {}
        }
        Ok(())
    }

    fn with_layer_context(&self, err: Error) -> Error {
        match err {
            Error::Dimension { op, detail } => Error::Dimension {
                op: format!("layer {} ({op})", self.name),
                detail,
            },
            other => other,
        }
    }

    /// Evaluation-mode forward: no cache is created.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        self.forward_inner(input)
            .map(|(out, _)| out)
            .map_err(|e| self.with_layer_context(e))
    }

    /// Training-mode forward: also returns the cache for [`Layer::backward`].
    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        self.check_input(input)?;
        let (out, argmax) = self
            .forward_inner(input)
            .map_err(|e| self.with_layer_context(e))?;
        let cache = match self.kind {
            LayerKind::Conv2d { .. } => LayerCache::Conv2d {
                input: input.clone(),
            },
            LayerKind::Linear { .. } => LayerCache::Linear {
                input: input.clone(),
            },
            LayerKind::Relu => LayerCache::Relu {
                input: input.clone(),
            },
            LayerKind::MaxPool2d { .. } => LayerCache::MaxPool2d {
                input_shape: input.shape().to_vec(),
                output_shape: out.shape().to_vec(),
                argmax: argmax.expect("maxpool records argmax"),
            },
            LayerKind::Flatten => LayerCache::Flatten {
                input_shape: input.shape().to_vec(),
            },
        };
        Ok((out, cache))
    }

    fn forward_inner(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        match self.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => Ok((
                ops::conv2d(input, self.weight(), self.bias(), stride, padding)?,
                None,
            )),
            LayerKind::Linear { out_features, .. } => {
                let n = input.shape()[0];
                let mut out = Vec::with_capacity(n * out_features);
                for _ in 0..n {
                    out.extend_from_slice(self.bias().data());
                }
                ops::gemm(
                    n,
                    input.shape()[1],
                    out_features,
                    input.data(),
                    false,
                    self.weight().data(),
                    false,
                    &mut out,
                    true,
                );
                Ok((Tensor::from_parts(vec![n, out_features], out), None))
            }
            LayerKind::Relu => Ok((ops::relu(input), None)),
            LayerKind::MaxPool2d { window, stride } => {
                let (out, argmax) = ops::maxpool2d(input, window, stride)?;
                Ok((out, Some(argmax)))
            }
            LayerKind::Flatten => {
                let n = input.shape()[0];
                let rest = input.len() / n;
                Ok((input.clone().reshape(&[n, rest])?, None))
            }
        }
    }

    /// Given the cache from the matching training-mode forward and the
    /// gradient of the loss with respect to this layer's output, return the
    /// gradient with respect to its input and to each of its parameters.
    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, GradientSet<T>)> {
        let op = format!("layer {} backward", self.name);
        let mut grads = GradientSet::new();
        let input_grad = match (&self.kind, cache) {
            (
                LayerKind::Conv2d {
                    stride, padding, ..
                },
                LayerCache::Conv2d { input },
            ) => {
                let g = ops::conv2d_backward(input, self.weight(), upstream, *stride, *padding)
                    .map_err(|e| self.with_layer_context(e))?;
                let params = self.params.as_ref().expect("parametrized layer");
                grads.insert(params.weight_name(), g.kernel)?;
                grads.insert(params.bias_name(), g.bias)?;
                g.input
            }
            (
                LayerKind::Linear {
                    in_features,
                    out_features,
                },
                LayerCache::Linear { input },
            ) => {
                let n = input.shape()[0];
                if upstream.shape() != [n, *out_features] {
                    return Err(Error::dim(
                        op,
                        format!(
                            "upstream gradient has shape {:?}, expected [{n}, {out_features}]",
                            upstream.shape()
                        ),
                    ));
                }
                let mut dw = vec![T::zero(); in_features * out_features];
                ops::gemm(
                    *in_features,
                    n,
                    *out_features,
                    input.data(),
                    true,
                    upstream.data(),
                    false,
                    &mut dw,
                    false,
                );
                let mut db = vec![T::zero(); *out_features];
                for row in upstream.data().chunks(*out_features) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
                let mut dx = vec![T::zero(); n * in_features];
                ops::gemm(
                    n,
                    *out_features,
                    *in_features,
                    upstream.data(),
                    false,
                    self.weight().data(),
                    true,
                    &mut dx,
                    false,
                );
                let params = self.params.as_ref().expect("parametrized layer");
                grads.insert(
                    params.weight_name(),
                    Tensor::from_parts(vec![*in_features, *out_features], dw),
                )?;
                grads.insert(
                    params.bias_name(),
                    Tensor::from_parts(vec![*out_features], db),
                )?;
                Tensor::from_parts(vec![n, *in_features], dx)
            }
            (LayerKind::Relu, LayerCache::Relu { input }) => {
                ops::relu_backward(input, upstream).map_err(|e| self.with_layer_context(e))?
            }
            (
                LayerKind::MaxPool2d { .. },
                LayerCache::MaxPool2d {
                    input_shape,
                    output_shape,
                    argmax,
                },
            ) => {
                if upstream.shape() != output_shape.as_slice() {
                    return Err(Error::dim(
                        op,
                        format!(
                            "upstream gradient has shape {:?}, forward output was {output_shape:?}",
                            upstream.shape()
                        ),
                    ));
                }
                ops::maxpool2d_backward(upstream, argmax, input_shape)?
            }
            (LayerKind::Flatten, LayerCache::Flatten { input_shape }) => {
                let n = input_shape[0];
                let rest: usize = input_shape[1..].iter().product();
                if upstream.shape() != [n, rest] {
                    return Err(Error::dim(
                        op,
                        format!(
                            "upstream gradient has shape {:?}, expected [{n}, {rest}]",
                            upstream.shape()
                        ),
                    ));
                }
                upstream.clone().reshape(input_shape)?
            }
            (kind, cache) => {
                return Err(Error::State(format!(
                    "layer {} ({kind:?}) was handed a {} cache",
                    self.name,
                    cache.kind_name()
                )))
            }
        };
        Ok((input_grad, grads))
    }
}
