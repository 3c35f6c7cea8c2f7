//! Reverse-mode gradients for every layer kind.
//!
//! Each layer caches what its backward pass needs during a forward sweep;
//! the backward sweep then walks the cache in reverse. Gradients are
//! accumulated per sample in a fixed order, so results are reproducible.

use crate::conv::{conv_forward_decomposed_traced, fc_forward, pad, ConvSpec, MultCount};
use crate::error::{invalid, Error, Result};
use crate::network::{add_channel_bias, LayerKind, NetworkSpec};
use crate::tensor::{dot, DenseTensor};

/// Per-sample objective on the network output.
pub trait Loss {
    type Target: ?Sized;

    /// Loss value and its gradient with respect to `output`.
    fn value_and_grad(&self, output: &[f64], target: &Self::Target) -> Result<(f64, Vec<f64>)>;
}

/// Softmax followed by negative log-likelihood of the target class.
#[derive(Debug, Clone, Copy, Default)]
pub struct SoftmaxCrossEntropy;

impl Loss for SoftmaxCrossEntropy {
    type Target = usize;

    fn value_and_grad(&self, output: &[f64], target: &usize) -> Result<(f64, Vec<f64>)> {
        if *target >= output.len() {
            return invalid(format!("label {target} out of range for {} outputs", output.len()));
        }
        let max = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = output.iter().map(|&o| (o - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - output[*target];
        let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        grad[*target] -= 1.0;
        Ok((loss, grad))
    }
}

/// `Σ (o − y)²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredError;

impl Loss for SquaredError {
    type Target = [f64];

    fn value_and_grad(&self, output: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        if output.len() != target.len() {
            return invalid(format!("target length {} does not match output length {}", target.len(), output.len()));
        }
        let diff: Vec<f64> = output.iter().zip(target).map(|(o, y)| o - y).collect();
        Ok((dot(&diff, &diff), diff.iter().map(|d| 2.0 * d).collect()))
    }
}

/// Gradients of every trainable tensor, in layer order and
/// [`LayerKind::params`] order within a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub name: String,
    pub tensors: Vec<(&'static str, DenseTensor)>,
}

impl Gradients {
    fn zeros_like(net: &NetworkSpec) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGrads {
                    name: l.name.clone(),
                    tensors: l.kind.params().into_iter().map(|(role, t)| (role, DenseTensor::zeros(t.shape()))).collect(),
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGrads] {
        &self.layers
    }

    pub fn get(&self, layer: &str, role: &str) -> Option<&DenseTensor> {
        self.layers
            .iter()
            .find(|l| l.name == layer)?
            .tensors
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, t)| t)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.tensors.iter())
            .map(|(_, t)| t.max_abs())
            .fold(0.0, f64::max)
    }
}

/// What a layer keeps from its forward pass.
struct Cache {
    input: DenseTensor,
    /// Decomposed conv: mixed and filtered activations. Decomposed fc: the
    /// rank-`R` bottleneck.
    inner: Vec<DenseTensor>,
}

fn diverged_if_nonfinite(t: &DenseTensor, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite activation after layer `{layer}`")))
    }
}

fn forward_cached(net: &NetworkSpec, x: &DenseTensor) -> Result<(DenseTensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(net.layers().len());
    let mut cur = x.clone();
    let mut count = MultCount::default();
    for layer in net.layers() {
        let mut inner = Vec::new();
        let out = match &layer.kind {
            LayerKind::DecomposedConv { spec, factors, bias } => {
                let trace = conv_forward_decomposed_traced(&cur, factors, spec, &mut count)?;
                inner.push(trace.mixed);
                inner.push(trace.filtered);
                add_channel_bias(trace.output, bias)?
            }
            LayerKind::DecomposedFc { factors, bias } => {
                let z = fc_forward(cur.data(), factors.vt(), &vec![0.0; factors.rank()])?;
                let y = fc_forward(&z, factors.ud(), bias.data())?;
                inner.push(DenseTensor::vector(z));
                DenseTensor::vector(y)
            }
            k => k.forward(&cur, &mut count)?,
        };
        diverged_if_nonfinite(&out, &layer.name)?;
        caches.push(Cache { input: cur, inner });
        cur = out;
    }
    Ok((cur, caches))
}

fn unpad(xp: &[f64], c: usize, w: usize, h: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return xp.to_vec();
    }
    let (wp, hp) = (w + 2 * p, h + 2 * p);
    let mut out = vec![0.0; c * w * h];
    for ci in 0..c {
        for wi in 0..w {
            let src = (ci * wp + wi + p) * hp + p;
            out[(ci * w + wi) * h..(ci * w + wi + 1) * h].copy_from_slice(&xp[src..src + h]);
        }
    }
    out
}

/// Accumulates the kernel gradient into `dk` and returns the input gradient.
fn conv_backward(x: &DenseTensor, k: &[f64], spec: &ConvSpec, dy: &[f64], dk: &mut [f64]) -> Result<Vec<f64>> {
    let (w, h) = (x.shape()[1], x.shape()[2]);
    let (wo, ho) = (spec.output_extent(w)?, spec.output_extent(h)?);
    let (t, s, d, stride, p) = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.stride, spec.padding);
    let (wp, hp) = (w + 2 * p, h + 2 * p);
    let xp = pad(x.data(), s, w, h, p);
    let mut dxp = vec![0.0; s * wp * hp];
    for ti in 0..t {
        let g = &dy[ti * wo * ho..(ti + 1) * wo * ho];
        for si in 0..s {
            let base = si * wp * hp;
            for j in 0..d {
                for i in 0..d {
                    let ki = ((ti * s + si) * d + j) * d + i;
                    let kv = k[ki];
                    let mut acc = 0.0;
                    for wo_i in 0..wo {
                        let off = base + (wo_i * stride + j) * hp + i;
                        for ho_i in 0..ho {
                            let gv = g[wo_i * ho + ho_i];
                            acc += gv * xp[off + ho_i * stride];
                            dxp[off + ho_i * stride] += kv * gv;
                        }
                    }
                    dk[ki] += acc;
                }
            }
        }
    }
    Ok(unpad(&dxp, s, w, h, p))
}

fn depthwise_backward(x: &DenseTensor, f: &[f64], d: usize, stride: usize, p: usize, dy: &[f64], df: &mut [f64]) -> Result<Vec<f64>> {
    let (r, w, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let geom = ConvSpec::new(r, r, d, stride, p);
    let (wo, ho) = (geom.output_extent(w)?, geom.output_extent(h)?);
    let (wp, hp) = (w + 2 * p, h + 2 * p);
    let xp = pad(x.data(), r, w, h, p);
    let mut dxp = vec![0.0; r * wp * hp];
    for ri in 0..r {
        let g = &dy[ri * wo * ho..(ri + 1) * wo * ho];
        let base = ri * wp * hp;
        for j in 0..d {
            for i in 0..d {
                let fi = (ri * d + j) * d + i;
                let fv = f[fi];
                let mut acc = 0.0;
                for wo_i in 0..wo {
                    let off = base + (wo_i * stride + j) * hp + i;
                    for ho_i in 0..ho {
                        let gv = g[wo_i * ho + ho_i];
                        acc += gv * xp[off + ho_i * stride];
                        dxp[off + ho_i * stride] += fv * gv;
                    }
                }
                df[fi] += acc;
            }
        }
    }
    Ok(unpad(&dxp, r, w, h, p))
}

/// `y[o] = Σ_c M[o,c] x[c]` per pixel.
fn pointwise_backward(x: &[f64], m: &[f64], cout: usize, cin: usize, dy: &[f64], dm: &mut [f64]) -> Vec<f64> {
    let plane = x.len() / cin;
    let mut dx = vec![0.0; x.len()];
    for o in 0..cout {
        let g = &dy[o * plane..(o + 1) * plane];
        for c in 0..cin {
            let xc = &x[c * plane..(c + 1) * plane];
            dm[o * cin + c] += dot(g, xc);
            let coeff = m[o * cin + c];
            for (d, &gv) in dx[c * plane..(c + 1) * plane].iter_mut().zip(g) {
                *d += coeff * gv;
            }
        }
    }
    dx
}

/// `y = W x (+ b)` with `W` `M×N`.
fn dense_backward(x: &[f64], w: &[f64], m: usize, n: usize, dy: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n];
    for r in 0..m {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * n..(r + 1) * n];
        for ((dwv, &xv), (dxv, &wv)) in dw[r * n..(r + 1) * n].iter_mut().zip(x).zip(dx.iter_mut().zip(row)) {
            *dwv += g * xv;
            *dxv += g * wv;
        }
    }
    dx
}

fn channel_sums(dy: &[f64], channels: usize, db: &mut [f64]) {
    let plane = dy.len() / channels;
    for (c, b) in db.iter_mut().enumerate() {
        *b += dy[c * plane..(c + 1) * plane].iter().sum::<f64>();
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Back-propagates `dy` through one layer, accumulating parameter gradients
/// into `grads` (one buffer per tensor in `params()` order).
fn layer_backward(kind: &LayerKind, cache: &Cache, dy: Vec<f64>, grads: &mut [Vec<f64>]) -> Result<Vec<f64>> {
    let x = &cache.input;
    Ok(match kind {
        LayerKind::Conv { spec, weights, .. } => {
            channel_sums(&dy, spec.out_channels, &mut grads[1]);
            conv_backward(x, weights.data(), spec, &dy, &mut grads[0])?
        }
        LayerKind::DecomposedConv { spec, factors, .. } => {
            let (mixed, filtered) = (&cache.inner[0], &cache.inner[1]);
            let r = factors.rank();
            channel_sums(&dy, spec.out_channels, &mut grads[3]);
            let d_filtered = pointwise_backward(filtered.data(), factors.u3().data(), spec.out_channels, r, &dy, &mut grads[2]);
            let d_mixed = depthwise_backward(mixed, factors.u2().data(), spec.kernel_size, spec.stride, spec.padding, &d_filtered, &mut grads[1])?;
            pointwise_backward(x.data(), factors.u1().data(), r, spec.in_channels, &d_mixed, &mut grads[0])
        }
        LayerKind::Fc { weights, .. } => {
            let (m, n) = (weights.shape()[0], weights.shape()[1]);
            add_into(&mut grads[1], &dy);
            dense_backward(x.data(), weights.data(), m, n, &dy, &mut grads[0])
        }
        LayerKind::DecomposedFc { factors, .. } => {
            let z = &cache.inner[0];
            add_into(&mut grads[2], &dy);
            let dz = dense_backward(z.data(), factors.ud().data(), factors.rows(), factors.rank(), &dy, &mut grads[0]);
            dense_backward(x.data(), factors.vt().data(), factors.rank(), factors.cols(), &dz, &mut grads[1])
        }
        LayerKind::Relu => x.data().iter().zip(dy).map(|(&v, g)| if v > 0.0 { g } else { 0.0 }).collect(),
        LayerKind::MaxPool { window, stride } => {
            let (c, w, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let wo = (w - window) / stride + 1;
            let ho = (h - window) / stride + 1;
            let xd = x.data();
            let mut dx = vec![0.0; x.len()];
            for ci in 0..c {
                for a in 0..wo {
                    for b in 0..ho {
                        // Same scan order as the forward pass: the first maximum wins.
                        let mut best = (f64::NEG_INFINITY, 0);
                        for dw in 0..*window {
                            for dh in 0..*window {
                                let idx = (ci * w + a * stride + dw) * h + b * stride + dh;
                                if xd[idx] > best.0 {
                                    best = (xd[idx], idx);
                                }
                            }
                        }
                        dx[best.1] += dy[(ci * wo + a) * ho + b];
                    }
                }
            }
            dx
        }
        LayerKind::Flatten => dy,
    })
}

/// Runs one sample forward and backward, adding its gradients into `acc`.
fn accumulate_sample<L: Loss>(
    net: &NetworkSpec,
    x: &DenseTensor,
    target: &L::Target,
    loss: &L,
    acc: &mut [Vec<Vec<f64>>],
) -> Result<(f64, Vec<f64>)> {
    let (out, caches) = forward_cached(net, x)?;
    let (value, mut dy) = loss.value_and_grad(out.data(), target)?;
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss is {value}")));
    }
    for ((layer, cache), grads) in net.layers().iter().zip(&caches).zip(acc.iter_mut()).rev() {
        dy = layer_backward(&layer.kind, cache, dy, grads)?;
    }
    Ok((value, out.into_data()))
}

/// Per-batch result of [`backward`].
#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Network outputs, one per sample.
    pub outputs: Vec<Vec<f64>>,
    /// Gradients of the mean loss.
    pub grads: Gradients,
}

/// Exact gradients of the mean per-sample loss over `inputs` with respect to
/// every trainable tensor of `net`.
pub fn backward<L: Loss>(net: &NetworkSpec, inputs: &[&DenseTensor], targets: &[&L::Target], loss: &L) -> Result<BatchGrad> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return invalid(format!("batch of {} inputs with {} targets", inputs.len(), targets.len()));
    }
    let mut acc: Vec<Vec<Vec<f64>>> = net
        .layers()
        .iter()
        .map(|l| l.kind.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect())
        .collect();
    let mut total = 0.0;
    let mut outputs = Vec::with_capacity(inputs.len());
    for (x, t) in inputs.iter().zip(targets) {
        let (value, out) = accumulate_sample(net, x, *t, loss, &mut acc)?;
        total += value;
        outputs.push(out);
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = Gradients::zeros_like(net);
    for (layer, bufs) in grads.layers.iter_mut().zip(acc) {
        for ((_, t), buf) in layer.tensors.iter_mut().zip(bufs) {
            *t = DenseTensor::new(t.shape().to_vec(), buf.into_iter().map(|v| v * scale).collect())?;
        }
    }
    let mean = total * scale;
    if !mean.is_finite() || grads.layers.iter().flat_map(|l| &l.tensors).any(|(_, t)| !t.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(BatchGrad { loss: mean, outputs, grads })
}

/// `p ← p − lr(layer)·g` for every trainable tensor.
pub fn sgd_step(net: &NetworkSpec, grads: &Gradients, lr: impl Fn(&str) -> f64) -> Result<NetworkSpec> {
    let mut out = net.clone();
    for (index, (layer, g)) in net.layers().iter().zip(grads.layers()).enumerate() {
        if g.tensors.is_empty() {
            continue;
        }
        let rate = lr(&layer.name);
        let updated = layer
            .kind
            .params()
            .iter()
            .zip(&g.tensors)
            .map(|((_, p), (_, d))| DenseTensor::new(p.shape().to_vec(), p.data().iter().zip(d.data()).map(|(a, b)| a - rate * b).collect()))
            .collect::<Result<Vec<_>>>()?;
        out = out.with_layer(index, layer.kind.with_params(updated)?)?;
    }
    Ok(out)
}
