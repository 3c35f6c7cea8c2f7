//! Truncated SVD of fully connected weights and the two-layer split.
//!
//! Weights are stored `M×N` (one row per output unit, `y = W·x`). The split
//! keeps `U·D` (`M×R`) and `Vᵀ` (`R×N`) so the layer becomes `z = Vᵀ·x`
//! followed by `y = (U·D)·z`.

use crate::error::{invalid, Result};
use crate::tensor::{dot, DenseTensor};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `W = U·diag(s)·Vᵀ` with `K = min(M, N)` singular triplets in
/// non-increasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseTensor,
    pub singular_values: Vec<f64>,
    pub vt: DenseTensor,
}

/// Rank-`R` factors with the singular values folded into the left factor.
///
/// Equality compares the factors only; the retained singular values describe
/// the source matrix, not the layer.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    ud: DenseTensor,
    vt: DenseTensor,
    /// Every singular value of the source matrix, kept for error accounting.
    singular_values: Vec<f64>,
}

impl PartialEq for SvdFactors {
    fn eq(&self, other: &Self) -> bool {
        self.ud == other.ud && self.vt == other.vt
    }
}

impl SvdFactors {
    pub fn from_parts(ud: DenseTensor, vt: DenseTensor) -> Result<Self> {
        if ud.ndim() != 2 || vt.ndim() != 2 || ud.shape()[1] != vt.shape()[0] {
            return invalid(format!(
                "SVD factors {:?} and {:?} do not chain",
                ud.shape(),
                vt.shape()
            ));
        }
        Ok(Self {
            ud,
            vt,
            singular_values: Vec::new(),
        })
    }

    pub fn rank(&self) -> usize {
        self.vt.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.ud.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.vt.shape()[1]
    }

    pub fn ud(&self) -> &DenseTensor {
        &self.ud
    }

    pub fn vt(&self) -> &DenseTensor {
        &self.vt
    }

    pub fn into_parts(self) -> (DenseTensor, DenseTensor) {
        (self.ud, self.vt)
    }

    /// Singular values of the matrix this was truncated from (empty when
    /// built from raw parts).
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `sqrt(Σ_{k>R} σ_k²)`, the Eckart–Young truncation error.
    pub fn truncation_error(&self) -> f64 {
        self.singular_values
            .iter()
            .skip(self.rank())
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }

    /// `M·R + R·N`.
    pub fn param_count(&self) -> usize {
        self.ud.len() + self.vt.len()
    }

    /// `(U·D)·Vᵀ`, the truncated matrix.
    pub fn reconstruct(&self) -> DenseTensor {
        crate::tensor::matmul(&self.ud, &self.vt).expect("factor shapes chain")
    }
}

/// One-sided Jacobi on the columns of a column-major `rows × cols` block
/// (`rows ≥ cols`). Returns `(columns after rotation, V)` where both are
/// column-major and `A·V` equals the rotated columns.
fn hestenes(mut cols_data: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = cols_data.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols_data[p], &cols_data[p]);
                let beta = dot(&cols_data[q], &cols_data[q]);
                let gamma = dot(&cols_data[p], &cols_data[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols_data, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (cols_data, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn check_matrix(w: &DenseTensor) -> Result<(usize, usize)> {
    if w.ndim() != 2 {
        return invalid(format!("expected a matrix, got shape {:?}", w.shape()));
    }
    if !w.is_finite() {
        return invalid("matrix contains non-finite entries");
    }
    Ok((w.shape()[0], w.shape()[1]))
}

/// Thin SVD by one-sided Jacobi rotations on the thinner side.
pub fn svd(w: &DenseTensor) -> Result<Svd> {
    let (m, n) = check_matrix(w)?;
    let data = w.data();
    // Orthogonalize the columns of A (m ≥ n) or of Aᵀ (m < n).
    let transposed = m < n;
    let (rows, cols) = if transposed { (n, m) } else { (m, n) };
    let columns: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| if transposed { data[j * n + i] } else { data[i * n + j] })
                .collect()
        })
        .collect();
    let (rotated, v) = hestenes(columns);

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = rotated.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let k = cols;
    // left: rows×k from normalized rotated columns; right: cols×k from V.
    let mut left = vec![0.0; rows * k];
    let mut right = vec![0.0; cols * k];
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..rows {
                left[i * k + dst] = rotated[src][i] / s;
            }
        }
        for i in 0..cols {
            right[i * k + dst] = v[src][i];
        }
    }
    let left = DenseTensor::new(vec![rows, k], left)?;
    let right = DenseTensor::new(vec![cols, k], right)?;
    // A = left·Σ·rightᵀ; for the transposed case Aᵀ = left·Σ·rightᵀ.
    let (u, v_mat) = if transposed { (right, left) } else { (left, right) };
    Ok(Svd {
        u,
        singular_values: sigma,
        vt: crate::tensor::transpose(&v_mat)?,
    })
}

/// Best rank-`rank` approximation factors of `w`.
pub fn truncated_svd(w: &DenseTensor, rank: usize) -> Result<SvdFactors> {
    let (m, n) = check_matrix(w)?;
    if rank == 0 || rank > m.min(n) {
        return invalid(format!("rank {rank} outside 1..={} for a {m}×{n} matrix", m.min(n)));
    }
    let full = svd(w)?;
    let k = m.min(n);
    let u = full.u.data();
    let vt = full.vt.data();
    let mut ud = vec![0.0; m * rank];
    for i in 0..m {
        for r in 0..rank {
            ud[i * rank + r] = u[i * k + r] * full.singular_values[r];
        }
    }
    let vt_r = vt[..rank * n].to_vec();
    Ok(SvdFactors {
        ud: DenseTensor::new(vec![m, rank], ud)?,
        vt: DenseTensor::new(vec![rank, n], vt_r)?,
        singular_values: full.singular_values,
    })
}

/// Splits `y = W·x` into `z = Vᵀ·x`, `y = (U·D)·z`; returns `(U·D, Vᵀ)`.
pub fn split_fc(w: &DenseTensor, rank: usize) -> Result<(DenseTensor, DenseTensor)> {
    Ok(truncated_svd(w, rank)?.into_parts())
}
