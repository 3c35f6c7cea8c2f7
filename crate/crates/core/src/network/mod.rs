//! Layer graph, parameter/multiply accounting and layer replacement.
//!
//! A [`NetworkSpec`] is an ordered list of named slots. Decomposing a slot
//! swaps its kind in place (`Conv` → `DecomposedConv`, `Fc` → `DecomposedFc`)
//! and keeps the original name; the decomposed kinds run as three and two
//! stages respectively.

pub mod alexnet;
pub mod format;

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conv::{
    conv_forward_counted, conv_forward_decomposed_traced, fc_forward_counted, max_pool, pool_extent, relu, ConvSpec,
    MultCount,
};
use crate::cp::{decompose_kernel, CpFactors, TpmConfig};
use crate::error::{invalid, Result};
use crate::svd::{truncated_svd, SvdFactors};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        spec: ConvSpec,
        weights: DenseTensor,
        bias: DenseTensor,
    },
    DecomposedConv {
        spec: ConvSpec,
        factors: CpFactors,
        bias: DenseTensor,
    },
    /// `weights` is `M×N`: `M` outputs, `N` inputs.
    Fc { weights: DenseTensor, bias: DenseTensor },
    DecomposedFc { factors: SvdFactors, bias: DenseTensor },
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::DecomposedConv { .. } => "cp_conv",
            LayerKind::Fc { .. } => "fc",
            LayerKind::DecomposedFc { .. } => "svd_fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Number of executed stages: three for a CP conv, two for an SVD fc.
    pub fn stages(&self) -> usize {
        match self {
            LayerKind::DecomposedConv { .. } => 3,
            LayerKind::DecomposedFc { .. } => 2,
            _ => 1,
        }
    }

    pub fn is_decomposable(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    pub fn is_decomposed(&self) -> bool {
        matches!(self, LayerKind::DecomposedConv { .. } | LayerKind::DecomposedFc { .. })
    }

    /// Trainable tensors with their role names, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &DenseTensor)> {
        match self {
            LayerKind::Conv { weights, bias, .. } => vec![("weight", weights), ("bias", bias)],
            LayerKind::DecomposedConv { factors, bias, .. } => vec![
                ("u1", factors.u1()),
                ("u2", factors.u2()),
                ("u3", factors.u3()),
                ("bias", bias),
            ],
            LayerKind::Fc { weights, bias } => vec![("weight", weights), ("bias", bias)],
            LayerKind::DecomposedFc { factors, bias } => vec![("ud", factors.ud()), ("vt", factors.vt()), ("bias", bias)],
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Flatten => Vec::new(),
        }
    }

    /// Rebuilds the layer with new parameter tensors in [`params`](Self::params) order.
    pub fn with_params(&self, mut new: Vec<DenseTensor>) -> Result<LayerKind> {
        let expect = self.params();
        if new.len() != expect.len() {
            return invalid(format!("{} takes {} parameter tensors, got {}", self.tag(), expect.len(), new.len()));
        }
        for ((role, old), n) in expect.iter().zip(&new) {
            if old.shape() != n.shape() {
                return invalid(format!("{role}: shape {:?} does not match {:?}", n.shape(), old.shape()));
            }
        }
        let mut take = || new.remove(0);
        Ok(match self {
            LayerKind::Conv { spec, .. } => LayerKind::Conv {
                spec: *spec,
                weights: take(),
                bias: take(),
            },
            LayerKind::DecomposedConv { spec, .. } => {
                let (u1, u2, u3) = (take(), take(), take());
                LayerKind::DecomposedConv {
                    spec: *spec,
                    factors: CpFactors::new(u1, u2, u3)?,
                    bias: take(),
                }
            }
            LayerKind::Fc { .. } => LayerKind::Fc {
                weights: take(),
                bias: take(),
            },
            LayerKind::DecomposedFc { .. } => {
                let (ud, vt) = (take(), take());
                LayerKind::DecomposedFc {
                    factors: SvdFactors::from_parts(ud, vt)?,
                    bias: take(),
                }
            }
            other => other.clone(),
        })
    }

    /// Activation shape produced from `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |spec: &ConvSpec| -> Result<Vec<usize>> {
            if input.len() != 3 || input[0] != spec.in_channels {
                return invalid(format!("conv expecting {} channels got input {input:?}", spec.in_channels));
            }
            Ok(vec![spec.out_channels, spec.output_extent(input[1])?, spec.output_extent(input[2])?])
        };
        let dense = |m: usize, n: usize| -> Result<Vec<usize>> {
            if input != [n] {
                return invalid(format!("fc expecting input [{n}] got {input:?}"));
            }
            Ok(vec![m])
        };
        match self {
            LayerKind::Conv { spec, .. } | LayerKind::DecomposedConv { spec, .. } => spatial(spec),
            LayerKind::Fc { weights, .. } => dense(weights.shape()[0], weights.shape()[1]),
            LayerKind::DecomposedFc { factors, .. } => dense(factors.rows(), factors.cols()),
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool { window, stride } => {
                if input.len() != 3 {
                    return invalid(format!("max pool expects C×W×H, got {input:?}"));
                }
                Ok(vec![input[0], pool_extent(input[1], *window, *stride)?, pool_extent(input[2], *window, *stride)?])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn check_internal(&self) -> Result<()> {
        match self {
            LayerKind::Conv { spec, weights, bias } => {
                spec.validate()?;
                if weights.shape() != spec.kernel_shape() || bias.shape() != [spec.out_channels] {
                    return invalid(format!("conv weights {:?} / bias {:?} do not match {spec:?}", weights.shape(), bias.shape()));
                }
            }
            LayerKind::DecomposedConv { spec, factors, bias } => {
                spec.validate()?;
                if factors.in_channels() != spec.in_channels
                    || factors.out_channels() != spec.out_channels
                    || factors.kernel_size() != spec.kernel_size
                    || bias.shape() != [spec.out_channels]
                {
                    return invalid(format!("CP factors or bias do not match {spec:?}"));
                }
            }
            LayerKind::Fc { weights, bias } => {
                if weights.ndim() != 2 || bias.shape() != [weights.shape()[0]] {
                    return invalid(format!("fc weights {:?} / bias {:?} mismatch", weights.shape(), bias.shape()));
                }
            }
            LayerKind::DecomposedFc { factors, bias } => {
                if bias.shape() != [factors.rows()] {
                    return invalid("decomposed fc bias does not match output size");
                }
            }
            LayerKind::MaxPool { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return invalid("max pool window and stride must be positive");
                }
            }
            LayerKind::Relu | LayerKind::Flatten => {}
        }
        Ok(())
    }

    /// Applies the layer, adding executed multiplies to `count`.
    pub fn forward(&self, x: &DenseTensor, count: &mut MultCount) -> Result<DenseTensor> {
        match self {
            LayerKind::Conv { spec, weights, bias } => add_channel_bias(conv_forward_counted(x, weights, spec, count)?, bias),
            LayerKind::DecomposedConv { spec, factors, bias } => {
                add_channel_bias(conv_forward_decomposed_traced(x, factors, spec, count)?.output, bias)
            }
            LayerKind::Fc { weights, bias } => Ok(DenseTensor::vector(fc_forward_counted(x.data(), weights, bias.data(), count)?)),
            LayerKind::DecomposedFc { factors, bias } => {
                let zero = vec![0.0; factors.rank()];
                let z = fc_forward_counted(x.data(), factors.vt(), &zero, count)?;
                Ok(DenseTensor::vector(fc_forward_counted(&z, factors.ud(), bias.data(), count)?))
            }
            LayerKind::Relu => Ok(relu(x)),
            LayerKind::MaxPool { window, stride } => max_pool(x, *window, *stride),
            LayerKind::Flatten => x.clone().reshape(vec![x.len()]),
        }
    }
}

pub(crate) fn add_channel_bias(y: DenseTensor, bias: &DenseTensor) -> Result<DenseTensor> {
    let plane = y.len() / y.shape()[0];
    let b = bias.data();
    let shape = y.shape().to_vec();
    let mut data = y.into_data();
    for (i, v) in data.iter_mut().enumerate() {
        *v += b[i / plane];
    }
    DenseTensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Validates that names are unique and adjacent shapes compose.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if l.name.is_empty() || !seen.insert(l.name.as_str()) {
                return invalid(format!("layer names must be unique and non-empty (`{}`)", l.name));
            }
            l.kind.check_internal().map_err(|e| crate::Error::InvalidArgument(format!("layer `{}`: {e}", l.name)))?;
        }
        let net = Self { input_shape, layers };
        net.activation_shapes()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Executed layer count, with decomposed slots counted per stage.
    pub fn stage_count(&self) -> usize {
        self.layers.iter().map(|l| l.kind.stages()).sum()
    }

    /// Input shape followed by the output shape of every layer.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l
                .kind
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| crate::Error::InvalidArgument(format!("layer `{}`: {e}", l.name)))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.activation_shapes().expect("validated at construction").pop().expect("non-empty")
    }

    /// Names of all slots that can still be decomposed, in network order.
    pub fn decomposable_layers(&self) -> Vec<String> {
        self.layers.iter().filter(|l| l.kind.is_decomposable()).map(|l| l.name.clone()).collect()
    }

    /// Replaces the kind of one slot, re-validating the result.
    pub fn with_layer(&self, index: usize, kind: LayerKind) -> Result<NetworkSpec> {
        let mut layers = self.layers.clone();
        layers[index].kind = kind;
        NetworkSpec::new(self.input_shape.clone(), layers)
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        Ok(self.forward_counted(x)?.0)
    }

    /// Forward pass with the multiplies executed by each layer.
    pub fn forward_counted(&self, x: &DenseTensor) -> Result<(DenseTensor, Vec<u64>)> {
        if x.shape() != self.input_shape.as_slice() {
            return invalid(format!("input shape {:?} != network input {:?}", x.shape(), self.input_shape));
        }
        let mut cur = x.clone();
        let mut counts = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut c = MultCount::default();
            cur = l.kind.forward(&cur, &mut c)?;
            counts.push(c.get());
        }
        Ok((cur, counts))
    }
}

/// The factors that take over a slot.
#[derive(Debug, Clone)]
pub enum Replacement {
    Cp(CpFactors),
    Svd(SvdFactors),
}

/// Returns a copy of `net` with slot `layer_name` swapped for its decomposed
/// form. Biases carry over to the output-side stage.
pub fn replace_layer(net: &NetworkSpec, layer_name: &str, factors: Replacement) -> Result<NetworkSpec> {
    let index = net
        .layer_index(layer_name)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("no layer named `{layer_name}`")))?;
    let kind = match (&net.layers[index].kind, factors) {
        (LayerKind::Conv { spec, bias, .. }, Replacement::Cp(f)) => {
            if f.in_channels() != spec.in_channels || f.out_channels() != spec.out_channels || f.kernel_size() != spec.kernel_size {
                return invalid(format!("CP factors do not fit layer `{layer_name}`"));
            }
            LayerKind::DecomposedConv {
                spec: *spec,
                factors: f,
                bias: bias.clone(),
            }
        }
        (LayerKind::Fc { weights, bias }, Replacement::Svd(f)) => {
            if f.rows() != weights.shape()[0] || f.cols() != weights.shape()[1] {
                return invalid(format!("SVD factors do not fit layer `{layer_name}`"));
            }
            LayerKind::DecomposedFc { factors: f, bias: bias.clone() }
        }
        (k, _) if k.is_decomposed() => return invalid(format!("layer `{layer_name}` is already decomposed")),
        (k, _) => return invalid(format!("layer `{layer_name}` ({}) cannot take these factors", k.tag())),
    };
    net.with_layer(index, kind)
}

/// Decomposes one slot at `rank`: CP by tensor power method for conv, truncated SVD for fc.
pub fn decompose_layer(net: &NetworkSpec, layer_name: &str, rank: usize, seed: u64) -> Result<NetworkSpec> {
    let layer = net
        .layer(layer_name)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("no layer named `{layer_name}`")))?;
    let replacement = match &layer.kind {
        LayerKind::Conv { weights, .. } => Replacement::Cp(decompose_kernel(weights, &TpmConfig::new(rank).with_seed(seed))?),
        LayerKind::Fc { weights, .. } => Replacement::Svd(truncated_svd(weights, rank)?),
        k if k.is_decomposed() => return invalid(format!("layer `{layer_name}` is already decomposed")),
        k => return invalid(format!("layer `{layer_name}` ({}) has no weights to decompose", k.tag())),
    };
    replace_layer(net, layer_name, replacement)
}

/// Compression ratio `E` and speed-up ratio `C` of a CP-decomposed conv.
pub fn conv_ratios(spec: &ConvSpec, rank: usize, w: usize, h: usize, w_out: usize, h_out: usize) -> (f64, f64) {
    let (t, s, d2) = (spec.out_channels as f64, spec.in_channels as f64, (spec.kernel_size * spec.kernel_size) as f64);
    let r = rank as f64;
    let (wh, wh_out) = ((w * h) as f64, (w_out * h_out) as f64);
    let e = t * s * d2 / (r * s + r * d2 + t * r);
    let c = t * s * d2 * wh_out / (r * s * wh + r * d2 * wh_out + t * r * wh_out);
    (e, c)
}

/// `E = C = MN / (MR + RN)` for an SVD-split fc layer.
pub fn fc_ratios(m: usize, n: usize, rank: usize) -> f64 {
    (m * n) as f64 / (m * rank + rank * n) as f64
}

/// Closed-form parameter count of a CP conv: `R·S + R·D² + T·R`.
pub fn cp_param_count(spec: &ConvSpec, rank: usize) -> u64 {
    let d2 = spec.kernel_size * spec.kernel_size;
    (rank * spec.in_channels + rank * d2 + spec.out_channels * rank) as u64
}

/// Closed-form multiply count of a CP conv: `R·S·W·H + R·D²·W'·H' + T·R·W'·H'`.
pub fn cp_mult_count(spec: &ConvSpec, rank: usize, w: usize, h: usize, w_out: usize, h_out: usize) -> u64 {
    let d2 = spec.kernel_size * spec.kernel_size;
    (rank * spec.in_channels * w * h + rank * d2 * w_out * h_out + spec.out_channels * rank * w_out * h_out) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    /// `conv` or `fc`.
    pub group: String,
    pub rank: Option<usize>,
    pub original_params: u64,
    pub compressed_params: u64,
    pub original_mults: u64,
    pub compressed_mults: u64,
    pub bias_params: u64,
}

impl LayerReport {
    pub fn compression_ratio(&self) -> f64 {
        ratio(self.original_params, self.compressed_params)
    }

    pub fn speedup_ratio(&self) -> f64 {
        ratio(self.original_mults, self.compressed_mults)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if num == 0 && den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-layer and total weight and multiply counts; biases are tallied
/// separately and excluded from the ratios.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
}

impl CompressionReport {
    pub fn original_params(&self) -> u64 {
        self.layers.iter().map(|l| l.original_params).sum()
    }

    pub fn compressed_params(&self) -> u64 {
        self.layers.iter().map(|l| l.compressed_params).sum()
    }

    pub fn original_mults(&self) -> u64 {
        self.layers.iter().map(|l| l.original_mults).sum()
    }

    pub fn compressed_mults(&self) -> u64 {
        self.layers.iter().map(|l| l.compressed_mults).sum()
    }

    pub fn bias_params(&self) -> u64 {
        self.layers.iter().map(|l| l.bias_params).sum()
    }

    pub fn compression_ratio(&self) -> f64 {
        ratio(self.original_params(), self.compressed_params())
    }

    pub fn speedup_ratio(&self) -> f64 {
        ratio(self.original_mults(), self.compressed_mults())
    }

    /// Tab-separated table: one row per weighted layer, then a total row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("layer\tgroup\trank\tweights\tcompressed_weights\tE\tmults\tcompressed_mults\tC\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.4}",
                l.name,
                l.group,
                l.rank.map_or("-".to_string(), |r| r.to_string()),
                l.original_params,
                l.compressed_params,
                l.compression_ratio(),
                l.original_mults,
                l.compressed_mults,
                l.speedup_ratio()
            );
        }
        let _ = writeln!(
            out,
            "total\t-\t-\t{}\t{}\t{:.4}\t{}\t{}\t{:.4}",
            self.original_params(),
            self.compressed_params(),
            self.compression_ratio(),
            self.original_mults(),
            self.compressed_mults(),
            self.speedup_ratio()
        );
        out
    }
}

/// Counts materialized weights and the multiplies of one forward pass.
///
/// For decomposed slots the compressed counts come from the factor tensors
/// actually stored, and the original counts from the layer geometry.
pub fn count_params(net: &NetworkSpec) -> CompressionReport {
    let shapes = net.activation_shapes().expect("validated at construction");
    let mut layers = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        let (input, output) = (&shapes[i], &shapes[i + 1]);
        let row = match &l.kind {
            LayerKind::Conv { spec, weights, bias } => {
                let mults = (weights.len() * output[1] * output[2]) as u64;
                LayerReport {
                    name: l.name.clone(),
                    group: "conv".into(),
                    rank: None,
                    original_params: spec.weight_count() as u64,
                    compressed_params: weights.len() as u64,
                    original_mults: mults,
                    compressed_mults: mults,
                    bias_params: bias.len() as u64,
                }
            }
            LayerKind::DecomposedConv { spec, factors, bias } => {
                let (w, h, wo, ho) = (input[1], input[2], output[1], output[2]);
                let r = factors.rank();
                let d2 = spec.kernel_size * spec.kernel_size;
                LayerReport {
                    name: l.name.clone(),
                    group: "conv".into(),
                    rank: Some(r),
                    original_params: spec.weight_count() as u64,
                    compressed_params: factors.param_count() as u64,
                    original_mults: (spec.weight_count() * wo * ho) as u64,
                    compressed_mults: (factors.u1().len() * w * h + r * d2 * wo * ho + factors.u3().len() * wo * ho) as u64,
                    bias_params: bias.len() as u64,
                }
            }
            LayerKind::Fc { weights, bias } => LayerReport {
                name: l.name.clone(),
                group: "fc".into(),
                rank: None,
                original_params: weights.len() as u64,
                compressed_params: weights.len() as u64,
                original_mults: weights.len() as u64,
                compressed_mults: weights.len() as u64,
                bias_params: bias.len() as u64,
            },
            LayerKind::DecomposedFc { factors, bias } => {
                let full = (factors.rows() * factors.cols()) as u64;
                LayerReport {
                    name: l.name.clone(),
                    group: "fc".into(),
                    rank: Some(factors.rank()),
                    original_params: full,
                    compressed_params: factors.param_count() as u64,
                    original_mults: full,
                    compressed_mults: factors.param_count() as u64,
                    bias_params: bias.len() as u64,
                }
            }
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Flatten => continue,
        };
        layers.push(row);
    }
    CompressionReport { layers }
}

/// Layer-shape recipe for [`random_network`].
#[derive(Debug, Clone, Copy)]
pub enum LayerPlan {
    Conv { out_channels: usize, kernel_size: usize, stride: usize, padding: usize },
    Fc { outputs: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
}

/// Builds a network from a plan with He-scaled Gaussian weights and small
/// random biases, drawn from `seed`.
pub fn random_network(input_shape: &[usize], plan: &[LayerPlan], seed: u64) -> Result<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(plan.len());
    let (mut n_conv, mut n_fc, mut n_other) = (0, 0, 0);
    let gauss = |rng: &mut ChaCha8Rng, shape: &[usize], std: f64| {
        DenseTensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    };
    for step in plan {
        let (name, kind) = match *step {
            LayerPlan::Conv { out_channels, kernel_size, stride, padding } => {
                if shape.len() != 3 {
                    return invalid(format!("conv planned on non-spatial input {shape:?}"));
                }
                let spec = ConvSpec::new(out_channels, shape[0], kernel_size, stride, padding);
                let fan_in = (shape[0] * kernel_size * kernel_size) as f64;
                n_conv += 1;
                (
                    format!("conv{n_conv}"),
                    LayerKind::Conv {
                        spec,
                        weights: gauss(&mut rng, &spec.kernel_shape(), (2.0 / fan_in).sqrt()),
                        bias: gauss(&mut rng, &[out_channels], 0.01),
                    },
                )
            }
            LayerPlan::Fc { outputs } => {
                if shape.len() != 1 {
                    return invalid(format!("fc planned on non-flat input {shape:?}"));
                }
                n_fc += 1;
                (
                    format!("fc{n_fc}"),
                    LayerKind::Fc {
                        weights: gauss(&mut rng, &[outputs, shape[0]], (2.0 / shape[0] as f64).sqrt()),
                        bias: gauss(&mut rng, &[outputs], 0.01),
                    },
                )
            }
            LayerPlan::Relu => {
                n_other += 1;
                (format!("relu{n_other}"), LayerKind::Relu)
            }
            LayerPlan::MaxPool { window, stride } => {
                n_other += 1;
                (format!("pool{n_other}"), LayerKind::MaxPool { window, stride })
            }
            LayerPlan::Flatten => {
                n_other += 1;
                (format!("flatten{n_other}"), LayerKind::Flatten)
            }
        };
        shape = kind.output_shape(&shape)?;
        layers.push(Layer::new(name, kind));
    }
    NetworkSpec::new(input_shape.to_vec(), layers)
}
