//! CP decomposition of convolution kernels by the tensor power method.
//!
//! A `T×S×D×D` kernel is viewed as a 3-way `S × D² × T` tensor (the two
//! spatial modes stay fused). Rank-1 terms are fitted one at a time by
//! alternating closed-form mode updates and subtracted from the residual
//! before the next term is fitted. Earlier terms are never revisited.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::tensor::{add_scaled, frobenius_norm, l2_norm, mode_contract, outer_product, DenseTensor, Rank1Term};

/// Power iterations used to seed each mode vector.
const INIT_POWER_ITERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpmConfig {
    pub rank: usize,
    pub max_inner_iters: usize,
    /// Relative change of the scale below which a fit is considered converged.
    pub tol: f64,
    pub seed: u64,
}

impl TpmConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            max_inner_iters: 200,
            tol: 1e-8,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return invalid("rank must be at least 1");
        }
        if self.max_inner_iters == 0 {
            return invalid("max_inner_iters must be at least 1");
        }
        if !(self.tol > 0.0) {
            return invalid(format!("tolerance must be positive, got {}", self.tol));
        }
        Ok(())
    }
}

/// Factors of a CP-decomposed kernel.
///
/// `u1` is `R×S` (input-channel mixing), `u2` is `R×D×D` (one spatial filter
/// per component), `u3` is `T×R` (output-channel mixing). A freshly
/// decomposed kernel has unit-norm rows in `u1` and `u2`; all scale lives
/// in the columns of `u3`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    u1: DenseTensor,
    u2: DenseTensor,
    u3: DenseTensor,
}

impl CpFactors {
    pub fn new(u1: DenseTensor, u2: DenseTensor, u3: DenseTensor) -> Result<Self> {
        if u1.ndim() != 2 || u2.ndim() != 3 || u3.ndim() != 2 {
            return invalid(format!(
                "CP factors must be 2-, 3- and 2-way, got {:?}, {:?}, {:?}",
                u1.shape(),
                u2.shape(),
                u3.shape()
            ));
        }
        let r = u1.shape()[0];
        if u2.shape()[0] != r || u3.shape()[1] != r {
            return invalid(format!(
                "inconsistent CP ranks: u1 {:?}, u2 {:?}, u3 {:?}",
                u1.shape(),
                u2.shape(),
                u3.shape()
            ));
        }
        if u2.shape()[1] != u2.shape()[2] {
            return invalid(format!("spatial factor must be square, got {:?}", u2.shape()));
        }
        Ok(Self { u1, u2, u3 })
    }

    pub fn rank(&self) -> usize {
        self.u1.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.u1.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.u3.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.u2.shape()[1]
    }

    pub fn u1(&self) -> &DenseTensor {
        &self.u1
    }

    pub fn u2(&self) -> &DenseTensor {
        &self.u2
    }

    pub fn u3(&self) -> &DenseTensor {
        &self.u3
    }

    pub fn into_parts(self) -> (DenseTensor, DenseTensor, DenseTensor) {
        (self.u1, self.u2, self.u3)
    }

    /// `R·S + R·D² + T·R`.
    pub fn param_count(&self) -> usize {
        self.u1.len() + self.u2.len() + self.u3.len()
    }
}

fn check_finite(t: &DenseTensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        invalid("tensor contains non-finite values")
    }
}

fn unit_basis(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[0] = 1.0;
    v
}

/// Normalizes in place; returns the norm. A zero vector is left untouched.
fn normalize(v: &mut [f64]) -> f64 {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `(X₍ₘ₎ X₍ₘ₎ᵀ) v` for the mode-`m` unfolding of a 3-way tensor.
fn unfolding_gram_apply(t: &DenseTensor, mode: usize, v: &[f64]) -> Vec<f64> {
    let shape = t.shape();
    let (n0, n1, n2) = (shape[0], shape[1], shape[2]);
    let data = t.data();
    let at = |i: usize, j: usize, k: usize| data[(i * n1 + j) * n2 + k];
    match mode {
        0 => {
            let mut w = vec![0.0; n1 * n2];
            for (i, &vi) in v.iter().enumerate() {
                for (jk, wjk) in w.iter_mut().enumerate() {
                    *wjk += data[i * n1 * n2 + jk] * vi;
                }
            }
            (0..n0).map(|i| crate::tensor::dot(&data[i * n1 * n2..(i + 1) * n1 * n2], &w)).collect()
        }
        1 => {
            let mut w = vec![0.0; n0 * n2];
            for i in 0..n0 {
                for (j, &vj) in v.iter().enumerate() {
                    for k in 0..n2 {
                        w[i * n2 + k] += at(i, j, k) * vj;
                    }
                }
            }
            let mut out = vec![0.0; n1];
            for i in 0..n0 {
                for (j, o) in out.iter_mut().enumerate() {
                    for k in 0..n2 {
                        *o += at(i, j, k) * w[i * n2 + k];
                    }
                }
            }
            out
        }
        _ => {
            let mut w = vec![0.0; n0 * n1];
            for (ij, wij) in w.iter_mut().enumerate() {
                *wij = crate::tensor::dot(&data[ij * n2..(ij + 1) * n2], v);
            }
            let mut out = vec![0.0; n2];
            for (ij, &wij) in w.iter().enumerate() {
                for (k, o) in out.iter_mut().enumerate() {
                    *o += data[ij * n2 + k] * wij;
                }
            }
            out
        }
    }
}

fn init_mode_vector(t: &DenseTensor, mode: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = t.shape()[mode];
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    for _ in 0..INIT_POWER_ITERS {
        let mut next = unfolding_gram_apply(t, mode, &v);
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
    }
    v
}

/// Contracts a 3-way tensor with vectors on the two modes other than `keep`.
fn contract_others(t: &DenseTensor, keep: usize, vs: [&[f64]; 3]) -> Vec<f64> {
    // Contract the highest mode first so mode indices below it stay valid.
    let mut cur = t.clone();
    for m in (0..3).rev().filter(|&m| m != keep) {
        cur = mode_contract(&cur, m, vs[m]).expect("shapes checked by caller");
    }
    cur.into_data()
}

/// Result of one rank-1 fit with its per-sweep objective trace.
#[derive(Debug, Clone)]
pub struct Rank1Fit {
    pub term: Rank1Term,
    /// `‖target − λ·a⊗b⊗c‖²` after every coordinate-descent sweep.
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

/// Best rank-1 approximation of a 3-way tensor by alternating mode updates.
pub fn fit_rank1(target: &DenseTensor, cfg: &TpmConfig) -> Result<Rank1Term> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(fit_rank1_traced(target, cfg, &mut rng)?.term)
}

pub fn fit_rank1_traced(target: &DenseTensor, cfg: &TpmConfig, rng: &mut ChaCha8Rng) -> Result<Rank1Fit> {
    if target.ndim() != 3 {
        return invalid(format!("rank-1 fit expects a 3-way tensor, got {:?}", target.shape()));
    }
    if cfg.max_inner_iters == 0 || !(cfg.tol > 0.0) {
        return invalid("max_inner_iters must be >= 1 and tol > 0");
    }
    check_finite(target)?;
    let norm_sq = frobenius_norm(target).powi(2);
    if norm_sq == 0.0 {
        return Ok(Rank1Fit {
            term: Rank1Term {
                vectors: target.shape().iter().map(|&n| unit_basis(n)).collect(),
                scale: 0.0,
            },
            objective: vec![0.0],
            sweeps: 0,
        });
    }

    let mut vs: Vec<Vec<f64>> = (0..3).map(|m| init_mode_vector(target, m, rng)).collect();
    let mut scale = 0.0f64;
    let mut prev_scale = f64::NAN;
    let mut objective = Vec::new();
    let mut sweeps = 0;
    while sweeps < cfg.max_inner_iters {
        sweeps += 1;
        for mode in 0..3 {
            let mut next = contract_others(target, mode, [&vs[0], &vs[1], &vs[2]]);
            let n = normalize(&mut next);
            if n > 0.0 {
                vs[mode] = next;
            }
            if mode == 2 {
                scale = n;
            }
        }
        objective.push((norm_sq - scale * scale).max(0.0));
        if (scale - prev_scale).abs() < cfg.tol * scale {
            break;
        }
        prev_scale = scale;
    }
    Ok(Rank1Fit {
        term: Rank1Term { vectors: vs, scale },
        objective,
        sweeps,
    })
}

/// Permutes a `T×S×D×D` kernel into the `S × D² × T` view the fit runs on.
fn kernel_view(kernel: &DenseTensor) -> Result<DenseTensor> {
    if kernel.ndim() != 4 {
        return invalid(format!("kernel must be 4-way, got {:?}", kernel.shape()));
    }
    let (t, s, d0, d1) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if d0 != d1 {
        return invalid(format!("kernel must be spatially square, got {:?}", kernel.shape()));
    }
    let dd = d0 * d1;
    let src = kernel.data();
    let mut out = vec![0.0; s * dd * t];
    for ti in 0..t {
        for si in 0..s {
            for p in 0..dd {
                out[(si * dd + p) * t + ti] = src[(ti * s + si) * dd + p];
            }
        }
    }
    DenseTensor::new(vec![s, dd, t], out)
}

struct Deflation {
    terms: Vec<Rank1Term>,
    /// Residual norm after each accepted term.
    residual_norms: Vec<f64>,
}

fn deflate(view: &DenseTensor, rank: usize, cfg: &TpmConfig) -> Result<Deflation> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut residual = view.clone();
    let mut terms = Vec::with_capacity(rank);
    let mut residual_norms = Vec::with_capacity(rank);
    for _ in 0..rank {
        let fit = fit_rank1_traced(&residual, cfg, &mut rng)?;
        if fit.term.scale > 0.0 {
            residual = add_scaled(&residual, &fit.term.materialize()?, -1.0)?;
        }
        residual_norms.push(frobenius_norm(&residual));
        terms.push(fit.term);
    }
    Ok(Deflation {
        terms,
        residual_norms,
    })
}

fn check_rank(kernel: &DenseTensor, rank: usize) -> Result<()> {
    let bound: usize = kernel.shape().iter().product();
    if rank > bound {
        return invalid(format!(
            "rank {rank} exceeds the trivial bound {bound} for a {:?} kernel",
            kernel.shape()
        ));
    }
    Ok(())
}

/// Greedy rank-`cfg.rank` CP decomposition of a `T×S×D×D` kernel.
pub fn decompose_kernel(kernel: &DenseTensor, cfg: &TpmConfig) -> Result<CpFactors> {
    cfg.validate()?;
    let view = kernel_view(kernel)?;
    check_finite(kernel)?;
    check_rank(kernel, cfg.rank)?;
    let (t, s, d) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let r = cfg.rank;
    let deflation = deflate(&view, r, cfg)?;

    let mut u1 = vec![0.0; r * s];
    let mut u2 = vec![0.0; r * d * d];
    let mut u3 = vec![0.0; t * r];
    for (ri, term) in deflation.terms.iter().enumerate() {
        let [a, b, c] = [&term.vectors[0], &term.vectors[1], &term.vectors[2]];
        u1[ri * s..(ri + 1) * s].copy_from_slice(a);
        u2[ri * d * d..(ri + 1) * d * d].copy_from_slice(b);
        for (ti, &ct) in c.iter().enumerate() {
            u3[ti * r + ri] = term.scale * ct;
        }
    }
    CpFactors::new(
        DenseTensor::new(vec![r, s], u1)?,
        DenseTensor::new(vec![r, d, d], u2)?,
        DenseTensor::new(vec![t, r], u3)?,
    )
}

/// Dense `T×S×D×D` kernel `Σᵣ u1[r,s]·u2[r,j,i]·u3[t,r]`.
pub fn reconstruct(f: &CpFactors) -> Result<DenseTensor> {
    let (r, s, t, d) = (f.rank(), f.in_channels(), f.out_channels(), f.kernel_size());
    let dd = d * d;
    let (u1, u2, u3) = (f.u1.data(), f.u2.data(), f.u3.data());
    let mut out = vec![0.0; t * s * dd];
    for ti in 0..t {
        for si in 0..s {
            let dst = &mut out[(ti * s + si) * dd..(ti * s + si + 1) * dd];
            for ri in 0..r {
                let coeff = u3[ti * r + ri] * u1[ri * s + si];
                if coeff == 0.0 {
                    continue;
                }
                for (o, &w) in dst.iter_mut().zip(&u2[ri * dd..(ri + 1) * dd]) {
                    *o += coeff * w;
                }
            }
        }
    }
    DenseTensor::new(vec![t, s, d, d], out)
}

/// Relative residual `‖K − K₍ᵣ₎‖ / ‖K‖` after each of the first `max_rank` terms.
pub fn residual_curve(kernel: &DenseTensor, max_rank: usize, cfg: &TpmConfig) -> Result<Vec<f64>> {
    let cfg = TpmConfig { rank: max_rank, ..*cfg };
    cfg.validate()?;
    let view = kernel_view(kernel)?;
    check_finite(kernel)?;
    check_rank(kernel, max_rank)?;
    let norm = frobenius_norm(kernel);
    if norm == 0.0 {
        return Ok(vec![0.0; max_rank]);
    }
    let deflation = deflate(&view, max_rank, &cfg)?;
    Ok(deflation.residual_norms.into_iter().map(|x| x / norm).collect())
}

/// Builds a kernel from explicit CP components, used by tests and tooling:
/// `Σᵣ λᵣ · c_r ⊗ a_r ⊗ B_r` laid out as `T×S×D×D`.
pub fn kernel_from_terms(terms: &[Rank1Term], kernel_size: usize) -> Result<DenseTensor> {
    let first = terms.first().ok_or_else(|| crate::Error::InvalidArgument("no terms".into()))?;
    let (s, t) = (first.vectors[0].len(), first.vectors[2].len());
    let mut k = DenseTensor::zeros(&[t, s, kernel_size, kernel_size]);
    for term in terms {
        let [a, b, c] = [&term.vectors[0], &term.vectors[1], &term.vectors[2]];
        if b.len() != kernel_size * kernel_size {
            return invalid("spatial vector length must be D²");
        }
        let piece = outer_product(&[c.as_slice(), a.as_slice(), b.as_slice()])?
            .reshape(vec![t, s, kernel_size, kernel_size])?;
        k = add_scaled(&k, &piece, term.scale)?;
    }
    Ok(k)
}
