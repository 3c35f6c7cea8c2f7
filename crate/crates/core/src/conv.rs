//! Direct convolution, the three-stage decomposed pipeline, fully connected
//! layers and the pooling/activation plumbing the small networks need.
//!
//! Activations are `C×W×H` tensors. Every multiply in the inner loops is
//! tallied in a [`MultCount`] when the `mult-count` feature is on; taps that
//! land in zero padding are counted too, so the totals match the closed-form
//! costs `T·S·D²·W'·H'` and `R·S·W·H + R·D²·W'·H' + T·R·W'·H'`.

use serde::{Deserialize, Serialize};

use crate::cp::CpFactors;
use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, in_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_size,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return invalid("channel counts must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return invalid(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.stride == 0 {
            return invalid("stride must be at least 1");
        }
        Ok(())
    }

    /// `(W + 2p − D)/Δ + 1`, which must come out a positive integer.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return invalid(format!(
                "kernel {} does not fit input extent {input} with padding {}",
                self.kernel_size, self.padding
            ));
        }
        let span = padded - self.kernel_size;
        if span % self.stride != 0 {
            return invalid(format!(
                "(W + 2p - D) = {span} is not divisible by stride {}",
                self.stride
            ));
        }
        Ok(span / self.stride + 1)
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    /// `T·S·D²`.
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
    }

    /// The largest rank a CP decomposition of this kernel may use.
    pub fn max_cp_rank(&self) -> usize {
        self.weight_count()
    }
}

/// Exact multiply tally.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MultCount(u64);

impl MultCount {
    #[inline]
    pub fn add(&mut self, n: usize) {
        #[cfg(feature = "mult-count")]
        {
            self.0 += n as u64;
        }
        #[cfg(not(feature = "mult-count"))]
        let _ = n;
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}

fn check_activation(x: &DenseTensor, channels: usize) -> Result<(usize, usize)> {
    if x.ndim() != 3 || x.shape()[0] != channels {
        return invalid(format!(
            "expected a {channels}×W×H activation, got {:?}",
            x.shape()
        ));
    }
    Ok((x.shape()[1], x.shape()[2]))
}

/// Zero-pads the two spatial modes of a `C×W×H` buffer.
pub(crate) fn pad(x: &[f64], c: usize, w: usize, h: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return x.to_vec();
    }
    let (wp, hp) = (w + 2 * p, h + 2 * p);
    let mut out = vec![0.0; c * wp * hp];
    for ci in 0..c {
        for wi in 0..w {
            let src = &x[(ci * w + wi) * h..(ci * w + wi + 1) * h];
            let dst = (ci * wp + wi + p) * hp + p;
            out[dst..dst + h].copy_from_slice(src);
        }
    }
    out
}

pub fn conv_forward(x: &DenseTensor, k: &DenseTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    conv_forward_counted(x, k, spec, &mut MultCount::default())
}

/// `Y[t,w',h'] = Σ_{s,j,i} K[t,s,j,i] · X[s, w'Δ+j−p, h'Δ+i−p]`.
pub fn conv_forward_counted(x: &DenseTensor, k: &DenseTensor, spec: &ConvSpec, count: &mut MultCount) -> Result<DenseTensor> {
    spec.validate()?;
    if k.shape() != spec.kernel_shape() {
        return invalid(format!(
            "kernel shape {:?} does not match {:?}",
            k.shape(),
            spec.kernel_shape()
        ));
    }
    let (w, h) = check_activation(x, spec.in_channels)?;
    let (wo, ho) = (spec.output_extent(w)?, spec.output_extent(h)?);
    let (t, s, d, stride) = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.stride);
    let hp = h + 2 * spec.padding;
    let wp = w + 2 * spec.padding;
    let xp = pad(x.data(), s, w, h, spec.padding);
    let kd = k.data();
    let mut out = vec![0.0; t * wo * ho];
    for ti in 0..t {
        let y = &mut out[ti * wo * ho..(ti + 1) * wo * ho];
        for si in 0..s {
            let plane = &xp[si * wp * hp..(si + 1) * wp * hp];
            for j in 0..d {
                for i in 0..d {
                    let kv = kd[((ti * s + si) * d + j) * d + i];
                    for wo_i in 0..wo {
                        let row = &plane[(wo_i * stride + j) * hp + i..];
                        let dst = &mut y[wo_i * ho..(wo_i + 1) * ho];
                        for (ho_i, o) in dst.iter_mut().enumerate() {
                            *o += kv * row[ho_i * stride];
                        }
                        count.add(ho);
                    }
                }
            }
        }
    }
    DenseTensor::new(vec![t, wo, ho], out)
}

/// 1×1 convolution by a `Cout×Cin` matrix, stride 1, no padding.
pub fn pointwise_conv(x: &DenseTensor, m: &DenseTensor, count: &mut MultCount) -> Result<DenseTensor> {
    if m.ndim() != 2 {
        return invalid(format!("pointwise weights must be a matrix, got {:?}", m.shape()));
    }
    let (cout, cin) = (m.shape()[0], m.shape()[1]);
    let (w, h) = check_activation(x, cin)?;
    let plane = w * h;
    let xd = x.data();
    let md = m.data();
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for c in 0..cin {
            let coeff = md[o * cin + c];
            for (d, &v) in dst.iter_mut().zip(&xd[c * plane..(c + 1) * plane]) {
                *d += coeff * v;
            }
            count.add(plane);
        }
    }
    DenseTensor::new(vec![cout, w, h], out)
}

/// Per-channel `D×D` convolution: `Z'[r] = U2[r] ⋆ Z[r]`.
pub fn depthwise_conv(x: &DenseTensor, filters: &DenseTensor, stride: usize, padding: usize, count: &mut MultCount) -> Result<DenseTensor> {
    if filters.ndim() != 3 || filters.shape()[1] != filters.shape()[2] {
        return invalid(format!("depthwise filters must be R×D×D, got {:?}", filters.shape()));
    }
    let (r, d) = (filters.shape()[0], filters.shape()[1]);
    let geom = ConvSpec::new(r, r, d, stride, padding);
    geom.validate()?;
    let (w, h) = check_activation(x, r)?;
    let (wo, ho) = (geom.output_extent(w)?, geom.output_extent(h)?);
    let (wp, hp) = (w + 2 * padding, h + 2 * padding);
    let xp = pad(x.data(), r, w, h, padding);
    let fd = filters.data();
    let mut out = vec![0.0; r * wo * ho];
    for ri in 0..r {
        let plane = &xp[ri * wp * hp..(ri + 1) * wp * hp];
        let y = &mut out[ri * wo * ho..(ri + 1) * wo * ho];
        for j in 0..d {
            for i in 0..d {
                let kv = fd[(ri * d + j) * d + i];
                for wo_i in 0..wo {
                    let row = &plane[(wo_i * stride + j) * hp + i..];
                    for (ho_i, o) in y[wo_i * ho..(wo_i + 1) * ho].iter_mut().enumerate() {
                        *o += kv * row[ho_i * stride];
                    }
                    count.add(ho);
                }
            }
        }
    }
    DenseTensor::new(vec![r, wo, ho], out)
}

/// Intermediate activations of the decomposed pipeline.
#[derive(Debug, Clone)]
pub struct DecomposedTrace {
    /// `R×W×H`, after input-channel mixing.
    pub mixed: DenseTensor,
    /// `R×W'×H'`, after the depthwise spatial stage.
    pub filtered: DenseTensor,
    /// `T×W'×H'`.
    pub output: DenseTensor,
}

pub fn conv_forward_decomposed(x: &DenseTensor, f: &CpFactors, spec: &ConvSpec) -> Result<DenseTensor> {
    Ok(conv_forward_decomposed_traced(x, f, spec, &mut MultCount::default())?.output)
}

/// 1×1 conv by `u1`, depthwise `D×D` conv by `u2` (the only stage that uses
/// stride and padding), then 1×1 conv by `u3`.
pub fn conv_forward_decomposed_traced(
    x: &DenseTensor,
    f: &CpFactors,
    spec: &ConvSpec,
    count: &mut MultCount,
) -> Result<DecomposedTrace> {
    spec.validate()?;
    if f.in_channels() != spec.in_channels || f.out_channels() != spec.out_channels || f.kernel_size() != spec.kernel_size {
        return invalid(format!(
            "factors (S={}, T={}, D={}) do not match {spec:?}",
            f.in_channels(),
            f.out_channels(),
            f.kernel_size()
        ));
    }
    let mixed = pointwise_conv(x, f.u1(), count)?;
    let filtered = depthwise_conv(&mixed, f.u2(), spec.stride, spec.padding, count)?;
    let output = pointwise_conv(&filtered, f.u3(), count)?;
    Ok(DecomposedTrace {
        mixed,
        filtered,
        output,
    })
}

pub fn fc_forward(x: &[f64], w: &DenseTensor, bias: &[f64]) -> Result<Vec<f64>> {
    fc_forward_counted(x, w, bias, &mut MultCount::default())
}

/// `y = W·x + b` with `W` stored `M×N`, one row per output unit.
pub fn fc_forward_counted(x: &[f64], w: &DenseTensor, bias: &[f64], count: &mut MultCount) -> Result<Vec<f64>> {
    if w.ndim() != 2 {
        return invalid(format!("fc weights must be a matrix, got {:?}", w.shape()));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != n || bias.len() != m {
        return invalid(format!(
            "fc {m}×{n} got input of length {} and bias of length {}",
            x.len(),
            bias.len()
        ));
    }
    let wd = w.data();
    let y = (0..m)
        .map(|r| bias[r] + crate::tensor::dot(&wd[r * n..(r + 1) * n], x))
        .collect();
    count.add(m * n);
    Ok(y)
}

pub fn relu(x: &DenseTensor) -> DenseTensor {
    x.map(|v| v.max(0.0))
}

/// Output extent of a pooling window; floor semantics, no padding.
pub fn pool_extent(input: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return invalid("pool window and stride must be positive");
    }
    if window > input {
        return invalid(format!("pool window {window} exceeds input extent {input}"));
    }
    Ok((input - window) / stride + 1)
}

/// Channel-wise max pooling over `window×window` patches.
pub fn max_pool(x: &DenseTensor, window: usize, stride: usize) -> Result<DenseTensor> {
    if x.ndim() != 3 {
        return invalid(format!("max_pool expects C×W×H, got {:?}", x.shape()));
    }
    let (c, w, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (wo, ho) = (pool_extent(w, window, stride)?, pool_extent(h, window, stride)?);
    let xd = x.data();
    Ok(DenseTensor::from_fn(&[c, wo, ho], |ix| {
        let (ci, a, b) = (ix[0], ix[1] * stride, ix[2] * stride);
        let mut m = f64::NEG_INFINITY;
        for dw in 0..window {
            for dh in 0..window {
                m = m.max(xd[(ci * w + a + dw) * h + b + dh]);
            }
        }
        m
    }))
}
