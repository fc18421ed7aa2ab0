//! The fixed four-conv / four-FC classifier.
//!
//! Each conv block is `Conv(3x3, stride 1, pad 1) -> ReLU -> MaxPool(2x2, stride 2)`.
//! With the default widths a 75x75 input shrinks 75 -> 37 -> 18 -> 9 -> 4, is
//! flattened to `128 * 4 * 4 = 2048` features and then passes through
//! `2048 -> 256 -> 128 -> 64 -> 3` fully connected layers with ReLU between
//! the hidden ones. The network emits raw logits.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CHANNELS, DEFAULT_IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers::{GradientSet, Layer, LayerCache, LayerKind};
use crate::tensor::{Scalar, Tensor};

pub const CONV_BLOCKS: usize = 4;
pub const HIDDEN_FC: usize = 3;
const KERNEL: usize = 3;
const POOL: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CardioNetConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub fc_widths: Vec<usize>,
    pub num_classes: usize,
}

impl Default for CardioNetConfig {
    fn default() -> Self {
        Self {
            input_size: DEFAULT_IMAGE_SIZE,
            in_channels: CHANNELS,
            conv_channels: vec![16, 32, 64, 128],
            fc_widths: vec![256, 128, 64],
            num_classes: NUM_CLASSES,
        }
    }
}

impl CardioNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != CONV_BLOCKS {
            return Err(Error::Config(format!(
                "expected {CONV_BLOCKS} conv widths, got {:?}",
                self.conv_channels
            )));
        }
        if self.fc_widths.len() != HIDDEN_FC {
            return Err(Error::Config(format!(
                "expected {HIDDEN_FC} hidden FC widths, got {:?}",
                self.fc_widths
            )));
        }
        if self
            .conv_channels
            .iter()
            .chain(&self.fc_widths)
            .any(|&w| w == 0)
            || self.in_channels == 0
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "the classifier has {NUM_CLASSES} classes, config says {}",
                self.num_classes
            )));
        }
        self.spatial_sizes().map(|_| ())
    }

    /// Spatial side length entering each conv block and after the last one.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![self.input_size];
        let mut s = self.input_size;
        for block in 0..CONV_BLOCKS {
            if s < POOL {
                return Err(Error::Config(format!(
                    "input size {} is too small: block {} would pool a {s}x{s} map",
                    self.input_size,
                    block + 1
                )));
            }
            s = (s - POOL) / POOL + 1;
            sizes.push(s);
        }
        Ok(sizes)
    }

    pub fn flatten_width(&self) -> Result<usize> {
        let s = *self.spatial_sizes()?.last().expect("nonempty");
        Ok(self.conv_channels[CONV_BLOCKS - 1] * s * s)
    }

    fn layer_plan(&self) -> Result<Vec<(String, LayerKind)>> {
        self.validate()?;
        let mut plan = Vec::new();
        let mut in_ch = self.in_channels;
        for (i, &out_ch) in self.conv_channels.iter().enumerate() {
            let b = i + 1;
            plan.push((
                format!("conv{b}"),
                LayerKind::Conv2d {
                    in_channels: in_ch,
                    out_channels: out_ch,
                    kernel_size: KERNEL,
                    stride: 1,
                    padding: 1,
                },
            ));
            plan.push((format!("conv{b}.relu"), LayerKind::Relu));
            plan.push((
                format!("conv{b}.pool"),
                LayerKind::MaxPool2d {
                    window: POOL,
                    stride: POOL,
                },
            ));
            in_ch = out_ch;
        }
        plan.push(("flatten".into(), LayerKind::Flatten));
        let mut widths = vec![self.flatten_width()?];
        widths.extend(&self.fc_widths);
        widths.push(self.num_classes);
        for (i, pair) in widths.windows(2).enumerate() {
            let b = i + 1;
            plan.push((
                format!("fc{b}"),
                LayerKind::Linear {
                    in_features: pair[0],
                    out_features: pair[1],
                },
            ));
            if b < widths.len() - 1 {
                plan.push((format!("fc{b}.relu"), LayerKind::Relu));
            }
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call record of a forward pass. Only train-mode contexts carry caches.
#[derive(Debug, Clone)]
pub struct ForwardContext<T = f32> {
    mode: Mode,
    caches: Vec<LayerCache<T>>,
    batch: usize,
}

impl<T> ForwardContext<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardioNet<T = f32> {
    config: CardioNetConfig,
    layers: Vec<Layer<T>>,
    param_names: Vec<String>,
}

fn param_names<T: Scalar>(layers: &[Layer<T>]) -> Vec<String> {
    layers
        .iter()
        .filter_map(Layer::params)
        .flat_map(|p| [p.weight_name(), p.bias_name()])
        .collect()
}

impl<T: Scalar> CardioNet<T> {
    /// Fresh network; each parametrized layer draws its own seed from a
    /// ChaCha stream keyed by `seed`.
    pub fn new(config: CardioNetConfig, seed: u64) -> Result<Self> {
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Layer<T>> = config
            .layer_plan()?
            .into_iter()
            .map(|(name, kind)| {
                let s = if kind.has_params() {
                    seeds.next_u64()
                } else {
                    0
                };
                Layer::new(name, kind, s)
            })
            .collect();
        Ok(Self {
            param_names: param_names(&layers),
            config,
            layers,
        })
    }

    /// Every weight and bias zero.
    pub fn zeros(config: CardioNetConfig) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        for (_, p) in net.params_mut() {
            p.data_mut().fill(T::zero());
        }
        Ok(net)
    }

    /// Rebuild from named tensors; the names and shapes must match the
    /// configured architecture exactly.
    pub fn from_named_params<'a>(
        config: CardioNetConfig,
        params: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<Self> {
        let mut given: indexmap::IndexMap<&str, &Tensor<T>> = params.into_iter().collect();
        let mut layers = Vec::new();
        for (name, kind) in config.layer_plan()? {
            let layer = if kind.has_params() {
                let take = |map: &mut indexmap::IndexMap<&str, &Tensor<T>>, key: String| {
                    map.shift_remove(key.as_str())
                        .cloned()
                        .ok_or_else(|| Error::Alignment(format!("missing parameter {key}")))
                };
                let w = take(&mut given, format!("{name}.weight"))?;
                let b = take(&mut given, format!("{name}.bias"))?;
                Layer::with_params(name, kind, Some(w), Some(b))?
            } else {
                Layer::with_params(name, kind, None, None)?
            };
            layers.push(layer);
        }
        if !given.is_empty() {
            let extra: Vec<&str> = given.keys().copied().collect();
            return Err(Error::Alignment(format!("unexpected parameters {extra:?}")));
        }
        Ok(Self {
            param_names: param_names(&layers),
            config,
            layers,
        })
    }

    pub fn config(&self) -> &CardioNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Parameter names in enumeration order: layer order, weight before bias.
    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn params(&self) -> Vec<(&str, &Tensor<T>)> {
        let tensors = self.layers.iter().filter_map(Layer::params).flat_map(|p| {
            [
                &p.weight,
                p.bias.as_ref().expect("parametrized layers have a bias"),
            ]
        });
        self.param_names
            .iter()
            .map(String::as_str)
            .zip(tensors)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let tensors = self
            .layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|p| {
                [
                    &mut p.weight,
                    p.bias.as_mut().expect("parametrized layers have a bias"),
                ]
            });
        self.param_names
            .iter()
            .map(String::as_str)
            .zip(tensors)
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> CardioNet<U> {
        let converted: Vec<(String, Tensor<U>)> = self
            .params()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.cast()))
            .collect();
        CardioNet::from_named_params(
            self.config.clone(),
            converted.iter().map(|(n, t)| (n.as_str(), t)),
        )
        .expect("same architecture")
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        let c = self.config.in_channels;
        images.expect_rank(4, "model_forward", "images [N, C, H, W]")?;
        let shape = images.shape();
        for (axis, (&got, want)) in shape[1..].iter().zip([c, s, s]).enumerate() {
            if got != want {
                let axis_name = ["channel", "height", "width"][axis];
                return Err(Error::dim(
                    "model_forward",
                    format!(
                        "{axis_name} axis ({}) is {got}, expected {want}; input must be [N, {c}, {s}, {s}]",
                        axis + 1
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Logits `[N, classes]` without recording anything for backward.
    pub fn forward_eval(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let mut x = self.layers[0].forward(images)?;
        for layer in &self.layers[1..] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        images: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, ForwardContext<T>)> {
        let batch = images.shape().first().copied().unwrap_or(0);
        match mode {
            Mode::Eval => Ok((
                self.forward_eval(images)?,
                ForwardContext {
                    mode,
                    caches: Vec::new(),
                    batch,
                },
            )),
            Mode::Train => {
                self.check_input(images)?;
                let mut caches = Vec::with_capacity(self.layers.len());
                let (mut x, cache) = self.layers[0].forward_train(images)?;
                caches.push(cache);
                for layer in &self.layers[1..] {
                    let (y, cache) = layer.forward_train(&x)?;
                    caches.push(cache);
                    x = y;
                }
                Ok((
                    x,
                    ForwardContext {
                        mode,
                        caches,
                        batch,
                    },
                ))
            }
        }
    }

    /// Gradients of the loss with respect to every parameter, given its
    /// gradient with respect to the logits.
    pub fn backward(
        &self,
        ctx: &ForwardContext<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<GradientSet<T>> {
        if ctx.mode != Mode::Train || ctx.caches.len() != self.layers.len() {
            return Err(Error::State(
                "backward needs the context of a train-mode forward of this model".into(),
            ));
        }
        let expected = [ctx.batch, self.config.num_classes];
        if grad_logits.shape() != expected {
            return Err(Error::dim(
                "model_backward",
                format!(
                    "logit gradient has shape {:?}, expected {expected:?}",
                    grad_logits.shape()
                ),
            ));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_logits.clone();
        for (layer, cache) in self.layers.iter().zip(&ctx.caches).rev() {
            let (dx, grads) = layer.backward(cache, &upstream)?;
            per_layer.push(grads);
            upstream = dx;
        }
        let mut all = GradientSet::new();
        for grads in per_layer.into_iter().rev() {
            all.extend(grads)?;
        }
        Ok(all)
    }
}
