//! Finite-difference gradient checks in double precision.

use cardionet::layers::{Layer, LayerKind};
use cardionet::loss::softmax_cross_entropy;
use cardionet::model::{CardioNet, CardioNetConfig, Mode};
use cardionet::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rel_err;

pub const H: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so no finite-difference step crosses the
/// ReLU kink.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random_tensor(shape, rng).map(|v| v.signum() * (0.05 + v.abs()))
}

/// Distinct values spaced well beyond the step size so no pooling window
/// changes its argmax under perturbation.
pub fn distinct_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn central<F: FnMut(&Tensor<f64>) -> f64>(x: &Tensor<f64>, i: usize, mut f: F) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += H;
    let mut minus = x.clone();
    minus.data_mut()[i] -= H;
    (f(&plus) - f(&minus)) / (2.0 * H)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error over the input gradient and every parameter gradient
/// of one layer, for the scalar objective `sum(output * r)` with fixed
/// random `r`.
pub fn layer_max_rel_err(kind: LayerKind, input: Tensor<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let layer = Layer::<f64>::new("probe", kind, seed);
    let (out, cache) = layer.forward_train(&input).unwrap();
    let r = random_tensor(out.shape(), &mut rng);
    let (grad_in, grads) = layer.backward(&cache, &r).unwrap();

    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let n = central(&input, i, |x| dot(&layer.forward(x).unwrap(), &r));
        worst = worst.max(rel_err(grad_in.data()[i], n));
    }

    if let Some(p) = layer.params() {
        let weight = p.weight.clone();
        let bias = p.bias.clone();
        let analytic_w = grads.get(&p.weight_name()).unwrap();
        for i in 0..weight.len() {
            let n = central(&weight, i, |w| {
                let l = Layer::with_params("probe", kind, Some(w.clone()), bias.clone()).unwrap();
                dot(&l.forward(&input).unwrap(), &r)
            });
            worst = worst.max(rel_err(analytic_w.data()[i], n));
        }
        if let Some(b) = &bias {
            let analytic_b = grads.get(&p.bias_name()).unwrap();
            for i in 0..b.len() {
                let n = central(b, i, |bb| {
                    let l =
                        Layer::with_params("probe", kind, Some(weight.clone()), Some(bb.clone()))
                            .unwrap();
                    dot(&l.forward(&input).unwrap(), &r)
                });
                worst = worst.max(rel_err(analytic_b.data()[i], n));
            }
        }
    }
    worst
}

/// Max relative error over every parameter of the full network under the
/// mean softmax cross-entropy loss.
pub fn model_max_rel_err(config: CardioNetConfig, batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.input_size;
    let images = Tensor::new(
        vec![batch, config.in_channels, s, s],
        (0..batch * config.in_channels * s * s)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap();
    let targets: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    let mut net = CardioNet::<f64>::new(config, seed).unwrap();

    let (logits, ctx) = net.forward(&images, Mode::Train).unwrap();
    let (_, grad_logits) = softmax_cross_entropy(&logits, &targets).unwrap();
    let grads = net.backward(&ctx, &grad_logits).unwrap();

    let loss = |net: &CardioNet<f64>| {
        softmax_cross_entropy(&net.forward_eval(&images).unwrap(), &targets)
            .unwrap()
            .0
    };
    let names: Vec<String> = net.param_names().to_vec();
    let mut worst = 0.0f64;
    for name in &names {
        let analytic = grads.get(name).unwrap().clone();
        for i in 0..analytic.len() {
            let orig = net.param(name).unwrap().data()[i];
            net.param_mut(name).unwrap().data_mut()[i] = orig + H;
            let plus = loss(&net);
            net.param_mut(name).unwrap().data_mut()[i] = orig - H;
            let minus = loss(&net);
            net.param_mut(name).unwrap().data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / (2.0 * H)));
        }
    }
    worst
}
