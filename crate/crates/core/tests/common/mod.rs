#![allow(dead_code)]

use cpcomp::network::{LayerKind, NetworkSpec};
use cpcomp::train::Loss;
use cpcomp::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Mean loss of `net` over a batch, computed from plain forward passes.
pub fn batch_loss<L: Loss>(net: &NetworkSpec, inputs: &[&DenseTensor], targets: &[&L::Target], loss: &L) -> f64 {
    let total: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| loss.value_and_grad(net.forward(x).unwrap().data(), t).unwrap().0)
        .sum();
    total / inputs.len() as f64
}

fn perturbed(net: &NetworkSpec, layer: usize, tensor: usize, elem: usize, delta: f64) -> NetworkSpec {
    let kind = &net.layers()[layer].kind;
    let params: Vec<DenseTensor> = kind
        .params()
        .iter()
        .enumerate()
        .map(|(i, (_, t))| {
            if i != tensor {
                return (*t).clone();
            }
            let mut data = t.data().to_vec();
            data[elem] += delta;
            DenseTensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    net.with_layer(layer, kind.with_params(params).unwrap()).unwrap()
}

/// Central finite-difference gradient of every trainable tensor, in the same
/// layout as the analytic gradients: `(layer, role, tensor)`.
pub fn numeric_gradients<L: Loss>(
    net: &NetworkSpec,
    inputs: &[&DenseTensor],
    targets: &[&L::Target],
    loss: &L,
    h: f64,
) -> Vec<(String, &'static str, DenseTensor)> {
    let mut out = Vec::new();
    for (li, layer) in net.layers().iter().enumerate() {
        for (ti, (role, t)) in layer.kind.params().iter().enumerate() {
            let g: Vec<f64> = (0..t.len())
                .map(|e| {
                    let plus = batch_loss(&perturbed(net, li, ti, e, h), inputs, targets, loss);
                    let minus = batch_loss(&perturbed(net, li, ti, e, -h), inputs, targets, loss);
                    (plus - minus) / (2.0 * h)
                })
                .collect();
            out.push((layer.name.clone(), *role, DenseTensor::new(t.shape().to_vec(), g).unwrap()));
        }
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = cpcomp::frobenius_norm(a).max(cpcomp::frobenius_norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error between analytic and finite-difference gradients,
/// with the tensor it occurred in.
pub fn gradient_check<L: Loss>(
    net: &NetworkSpec,
    inputs: &[&DenseTensor],
    targets: &[&L::Target],
    loss: &L,
) -> (f64, String) {
    let analytic = cpcomp::train::backward(net, inputs, targets, loss).unwrap().grads;
    let mut worst = (0.0, String::new());
    for (layer, role, numeric) in numeric_gradients(net, inputs, targets, loss, 1e-5) {
        let a = analytic.get(&layer, role).unwrap();
        let e = relative_error(a, &numeric);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, format!("{layer}.{role}"));
        }
    }
    worst
}

/// Names of the layer kinds present in `net`.
pub fn kinds(net: &NetworkSpec) -> Vec<&'static str> {
    net.layers().iter().map(|l| l.kind.tag()).collect()
}

pub fn is_decomposed_everywhere(net: &NetworkSpec) -> bool {
    net.layers()
        .iter()
        .all(|l| !matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. }))
}

/// One small network per layer kind (the parameter-free kinds sit between
/// trainable layers so their backward pass is exercised), plus one network
/// containing every kind.
pub fn gradient_check_nets() -> Vec<(&'static str, NetworkSpec)> {
    use cpcomp::network::{decompose_layer, random_network, LayerPlan::*};
    let conv = |t, d, s, p| Conv { out_channels: t, kernel_size: d, stride: s, padding: p };
    let build = |input: &[usize], plan: &[cpcomp::network::LayerPlan], seed| random_network(input, plan, seed).unwrap();
    let conv_net = build(&[2, 7, 7], &[conv(3, 3, 2, 1), Flatten, Fc { outputs: 3 }], 1);
    let cp_net = decompose_layer(&build(&[3, 9, 9], &[conv(4, 5, 2, 2), Flatten, Fc { outputs: 3 }], 2), "conv1", 3, 0).unwrap();
    let fc_net = build(&[7], &[Fc { outputs: 4 }], 3);
    let svd_net = decompose_layer(&build(&[7], &[Fc { outputs: 5 }], 4), "fc1", 2, 0).unwrap();
    let relu_net = build(&[6], &[Fc { outputs: 5 }, Relu, Fc { outputs: 3 }], 5);
    let pool_net = build(&[2, 6, 6], &[conv(2, 3, 1, 1), MaxPool { window: 2, stride: 2 }, Flatten, Fc { outputs: 3 }], 6);
    let all = build(
        &[2, 9, 9],
        &[
            conv(4, 3, 2, 1),
            Relu,
            MaxPool { window: 2, stride: 1 },
            conv(3, 3, 1, 1),
            Relu,
            Flatten,
            Fc { outputs: 6 },
            Relu,
            Fc { outputs: 3 },
        ],
        7,
    );
    let all = decompose_layer(&decompose_layer(&all, "conv2", 3, 0).unwrap(), "fc1", 2, 0).unwrap();
    vec![
        ("conv", conv_net),
        ("cp_conv", cp_net),
        ("fc", fc_net),
        ("svd_fc", svd_net),
        ("relu", relu_net),
        ("maxpool+flatten", pool_net),
        ("all kinds", all),
    ]
}

/// Worst gradient-check error of `net` under cross-entropy and squared
/// error on a seeded batch of three samples.
pub fn check_net(net: &NetworkSpec, seed: u64) -> (f64, String) {
    use cpcomp::train::{SoftmaxCrossEntropy, SquaredError};
    let mut r = rng(seed);
    let xs: Vec<DenseTensor> = (0..3).map(|_| random_tensor(&mut r, net.input_shape())).collect();
    let inputs: Vec<&DenseTensor> = xs.iter().collect();
    let outputs = net.output_shape()[0];
    let labels: Vec<usize> = (0..3).map(|i| i % outputs).collect();
    let label_refs: Vec<&usize> = labels.iter().collect();
    let ys: Vec<Vec<f64>> = (0..3).map(|_| (0..outputs).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let y_refs: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
    let ce = gradient_check(net, &inputs, &label_refs, &SoftmaxCrossEntropy);
    let se = gradient_check(net, &inputs, &y_refs, &SquaredError);
    if ce.0 >= se.0 {
        ce
    } else {
        se
    }
}
