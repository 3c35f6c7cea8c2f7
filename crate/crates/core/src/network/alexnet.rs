//! AlexNet geometry for analytic compression accounting.
//!
//! Only layer shapes are stored; weights are never materialized for the
//! original 61M-parameter network. Costs are multiplies of one forward pass
//! on a 227×227 input, counting conv and fc weight multiplies only.
//!
//! Grouped layers (conv2, conv4, conv5) can be accounted two ways, see
//! [`Convention`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{cp_mult_count, cp_param_count, CompressionReport, Layer, LayerKind, LayerReport, NetworkSpec};
use crate::conv::ConvSpec;
use crate::cp::CpFactors;
use crate::error::{invalid, Result};
use crate::svd::SvdFactors;
use crate::tensor::DenseTensor;

pub const INPUT_EXTENT: usize = 227;

/// Ranks per layer: conv budget 750 and fc budget 900, split by the
/// measured rank-5 sensitivity.
pub const REFERENCE_RANKS: [(&str, usize); 8] = [
    ("conv1", 69),
    ("conv2", 154),
    ("conv3", 153),
    ("conv4", 178),
    ("conv5", 196),
    ("fc6", 365),
    ("fc7", 275),
    ("fc8", 260),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// `spec.in_channels` is the full input channel count; each group sees
    /// `in_channels / groups` of them.
    Conv {
        name: &'static str,
        spec: ConvSpec,
        groups: usize,
        input_extent: usize,
    },
    Fc {
        name: &'static str,
        outputs: usize,
        inputs: usize,
    },
}

impl Geometry {
    pub fn name(&self) -> &'static str {
        match self {
            Geometry::Conv { name, .. } | Geometry::Fc { name, .. } => name,
        }
    }
}

pub fn layers() -> Vec<Geometry> {
    let conv = |name, t, s, d, stride, pad, groups, input_extent| Geometry::Conv {
        name,
        spec: ConvSpec::new(t, s, d, stride, pad),
        groups,
        input_extent,
    };
    vec![
        conv("conv1", 96, 3, 11, 4, 0, 1, 227),
        conv("conv2", 256, 96, 5, 1, 2, 2, 27),
        conv("conv3", 384, 256, 3, 1, 1, 1, 13),
        conv("conv4", 384, 384, 3, 1, 1, 2, 13),
        conv("conv5", 256, 384, 3, 1, 1, 2, 13),
        Geometry::Fc { name: "fc6", outputs: 4096, inputs: 9216 },
        Geometry::Fc { name: "fc7", outputs: 4096, inputs: 4096 },
        Geometry::Fc { name: "fc8", outputs: 1000, inputs: 4096 },
    ]
}

/// How a decomposed grouped or input-facing conv layer is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    /// Every group is decomposed on its own at rank `⌈R/groups⌉`; all conv
    /// layers run the three-stage pipeline.
    PerGroup,
    /// Grouped kernels are expanded to one dense block-diagonal kernel and
    /// decomposed at rank `R`. The first conv layer, which sees the raw
    /// image, runs as two layers: a `D×D` conv `S→R` carrying the
    /// `u1 ⊗ u2` kernel, then a 1×1 conv `R→T`.
    FusedInputLayer,
}

impl Convention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-group" => Ok(Convention::PerGroup),
            "fused-input" => Ok(Convention::FusedInputLayer),
            other => invalid(format!("unknown accounting convention `{other}` (per-group | fused-input)")),
        }
    }
}

fn conv_output(spec: &ConvSpec, input: usize) -> usize {
    spec.output_extent(input).expect("preset geometry is valid")
}

fn original_row(g: &Geometry) -> LayerReport {
    match *g {
        Geometry::Conv { name, spec, groups, input_extent } => {
            let out = conv_output(&spec, input_extent);
            let params = (spec.weight_count() / groups) as u64;
            LayerReport {
                name: name.into(),
                group: "conv".into(),
                rank: None,
                original_params: params,
                compressed_params: params,
                original_mults: params * (out * out) as u64,
                compressed_mults: params * (out * out) as u64,
                bias_params: spec.out_channels as u64,
            }
        }
        Geometry::Fc { name, outputs, inputs } => {
            let n = (outputs * inputs) as u64;
            LayerReport {
                name: name.into(),
                group: "fc".into(),
                rank: None,
                original_params: n,
                compressed_params: n,
                original_mults: n,
                compressed_mults: n,
                bias_params: outputs as u64,
            }
        }
    }
}

/// Weight and cost accounting of the uncompressed network.
pub fn original_report() -> CompressionReport {
    CompressionReport {
        layers: layers().iter().map(original_row).collect(),
    }
}

fn rank_for(ranks: &[(&str, usize)], name: &str) -> Result<usize> {
    ranks
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, r)| r)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("no rank given for `{name}`")))
}

/// Accounting of the network with every layer decomposed at `ranks`.
pub fn compressed_report(ranks: &[(&str, usize)], convention: Convention) -> Result<CompressionReport> {
    let mut rows = Vec::new();
    for (index, g) in layers().iter().enumerate() {
        let mut row = original_row(g);
        let r = rank_for(ranks, g.name())?;
        if r == 0 {
            return invalid(format!("rank for `{}` must be positive", g.name()));
        }
        row.rank = Some(r);
        match *g {
            Geometry::Conv { spec, groups, input_extent, .. } => {
                let (w, wo) = (input_extent, conv_output(&spec, input_extent));
                let d2 = spec.kernel_size * spec.kernel_size;
                let (params, mults) = match convention {
                    Convention::PerGroup => {
                        let rg = r.div_ceil(groups);
                        let sub = ConvSpec::new(spec.out_channels / groups, spec.in_channels / groups, spec.kernel_size, spec.stride, spec.padding);
                        (
                            groups as u64 * cp_param_count(&sub, rg),
                            groups as u64 * cp_mult_count(&sub, rg, w, w, wo, wo),
                        )
                    }
                    Convention::FusedInputLayer if index == 0 => {
                        let first = r * spec.in_channels * d2;
                        let second = spec.out_channels * r;
                        ((first + second) as u64, ((first + second) * wo * wo) as u64)
                    }
                    Convention::FusedInputLayer => (cp_param_count(&spec, r), cp_mult_count(&spec, r, w, w, wo, wo)),
                };
                row.compressed_params = params;
                row.compressed_mults = mults;
            }
            Geometry::Fc { outputs, inputs, .. } => {
                let n = (outputs * r + r * inputs) as u64;
                row.compressed_params = n;
                row.compressed_mults = n;
            }
        }
        rows.push(row);
    }
    Ok(CompressionReport { layers: rows })
}

/// The compressed network in the [`Convention::FusedInputLayer`] layout,
/// with Gaussian factors drawn from `seed`. Used to measure multiply counts
/// by actually running a forward pass. LRN layers are omitted; they carry
/// no weight multiplies.
pub fn compressed_network(ranks: &[(&str, usize)], seed: u64) -> Result<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |shape: &[usize]| DenseTensor::from_fn(shape, |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
    let mut out = Vec::new();
    for (index, g) in layers().iter().enumerate() {
        let r = rank_for(ranks, g.name())?;
        match *g {
            Geometry::Conv { name, spec, .. } => {
                if index == 0 {
                    let first = ConvSpec::new(r, spec.in_channels, spec.kernel_size, spec.stride, spec.padding);
                    let second = ConvSpec::new(spec.out_channels, r, 1, 1, 0);
                    out.push(Layer::new(format!("{name}a"), LayerKind::Conv { spec: first, weights: gauss(&first.kernel_shape()), bias: DenseTensor::zeros(&[r]) }));
                    out.push(Layer::new(format!("{name}b"), LayerKind::Conv { spec: second, weights: gauss(&second.kernel_shape()), bias: gauss(&[spec.out_channels]) }));
                } else {
                    let d = spec.kernel_size;
                    let factors = CpFactors::new(gauss(&[r, spec.in_channels]), gauss(&[r, d, d]), gauss(&[spec.out_channels, r]))?;
                    out.push(Layer::new(name, LayerKind::DecomposedConv { spec, factors, bias: gauss(&[spec.out_channels]) }));
                }
                out.push(Layer::new(format!("{name}_relu"), LayerKind::Relu));
                if matches!(name, "conv1" | "conv2" | "conv5") {
                    out.push(Layer::new(format!("{name}_pool"), LayerKind::MaxPool { window: 3, stride: 2 }));
                }
                if name == "conv5" {
                    out.push(Layer::new("flatten", LayerKind::Flatten));
                }
            }
            Geometry::Fc { name, outputs, inputs } => {
                let factors = SvdFactors::from_parts(gauss(&[outputs, r]), gauss(&[r, inputs]))?;
                out.push(Layer::new(name, LayerKind::DecomposedFc { factors, bias: gauss(&[outputs]) }));
                if name != "fc8" {
                    out.push(Layer::new(format!("{name}_relu"), LayerKind::Relu));
                }
            }
        }
    }
    NetworkSpec::new(vec![3, INPUT_EXTENT, INPUT_EXTENT], out)
}

/// Multiplies executed by [`compressed_network`] on one input, summed per
/// original layer name (`conv1a` and `conv1b` both count toward `conv1`).
pub fn measured_mults(net: &NetworkSpec, seed: u64) -> Result<Vec<(String, u64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseTensor::from_fn(net.input_shape(), |_| rng.random_range(0.0..1.0));
    let (_, counts) = net.forward_counted(&x)?;
    let mut per_layer: Vec<(String, u64)> = Vec::new();
    for (l, c) in net.layers().iter().zip(counts) {
        if l.kind.params().is_empty() {
            continue;
        }
        let base = l.name.strip_suffix(['a', 'b']).unwrap_or(&l.name).to_string();
        match per_layer.last_mut() {
            Some((n, total)) if *n == base => *total += c,
            _ => per_layer.push((base, c)),
        }
    }
    Ok(per_layer)
}
