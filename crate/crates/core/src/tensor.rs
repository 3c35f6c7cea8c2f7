//! Dense N-way tensors and the handful of algebraic primitives the
//! decomposition, convolution and training code is built from.
//!
//! Storage is a flat row-major `Vec<f64>`; strides are precomputed at
//! construction and the shape never changes afterwards.

use std::fmt;
use std::ops::Index;

use crate::error::{invalid, Result};

#[derive(Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<f64>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for m in (0..shape.len().saturating_sub(1)).rev() {
        strides[m] = strides[m + 1] * shape[m + 1];
    }
    strides
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return invalid(format!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            ));
        }
        let strides = row_major_strides(&shape);
        Ok(Self {
            shape,
            strides,
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.contains(&0), "tensor extents must be positive");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data: vec![value; n],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..t.data.len() {
            t.data[flat] = f(&idx);
            for m in (0..shape.len()).rev() {
                idx[m] += 1;
                if idx[m] < shape[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        t
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, idx: &[usize]) -> Option<usize> {
        if idx.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for ((&i, &n), &s) in idx.iter().zip(&self.shape).zip(&self.strides) {
            if i >= n {
                return None;
            }
            off += i * s;
        }
        Some(off)
    }

    /// Bounds-checked element read.
    pub fn get(&self, idx: &[usize]) -> Option<f64> {
        self.offset(idx).map(|o| self.data[o])
    }

    /// Same data under a different shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            strides: self.strides.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|x| alpha * x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Index<&[usize]> for DenseTensor {
    type Output = f64;

    fn index(&self, idx: &[usize]) -> &f64 {
        match self.offset(idx) {
            Some(o) => &self.data[o],
            None => panic!("index {idx:?} out of bounds for shape {:?}", self.shape),
        }
    }
}

impl fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "DenseTensor{:?} [", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `scale · v₁ ⊗ v₂ ⊗ …` with every `vᵢ` of unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Term {
    pub vectors: Vec<Vec<f64>>,
    pub scale: f64,
}

impl Rank1Term {
    pub fn shape(&self) -> Vec<usize> {
        self.vectors.iter().map(Vec::len).collect()
    }

    pub fn materialize(&self) -> Result<DenseTensor> {
        Ok(outer_product(&self.vectors)?.scale(self.scale))
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Product of two matrices.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return invalid(format!("cannot multiply {:?} by {:?}", a.shape, b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            for (o, &bpj) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    DenseTensor::new(vec![m, n], out)
}

pub fn transpose(a: &DenseTensor) -> Result<DenseTensor> {
    if a.ndim() != 2 {
        return invalid(format!("transpose expects a matrix, got {:?}", a.shape));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    Ok(DenseTensor::from_fn(&[n, m], |ix| a.data[ix[1] * n + ix[0]]))
}

/// `v₁ ⊗ v₂ ⊗ …`. A single vector is accepted and returned as a 1-way tensor.
pub fn outer_product<V: AsRef<[f64]>>(vectors: &[V]) -> Result<DenseTensor> {
    if vectors.is_empty() {
        return invalid("outer product of an empty vector list");
    }
    if vectors.iter().any(|v| v.as_ref().is_empty()) {
        return invalid("outer product factors must be non-empty");
    }
    let mut data = vec![1.0];
    for v in vectors {
        let v = v.as_ref();
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &x in &data {
            next.extend(v.iter().map(|&y| x * y));
        }
        data = next;
    }
    let shape = vectors.iter().map(|v| v.as_ref().len()).collect();
    DenseTensor::new(shape, data)
}

/// Contracts `t` along `mode` with `v`: `Σₖ t[…, k, …]·v[k]`.
///
/// The result drops `mode` from the shape; contracting a vector yields a
/// 0-way tensor holding one value.
pub fn mode_contract(t: &DenseTensor, mode: usize, v: &[f64]) -> Result<DenseTensor> {
    if mode >= t.ndim() {
        return invalid(format!("mode {mode} out of range for {}-way tensor", t.ndim()));
    }
    let n = t.shape[mode];
    if v.len() != n {
        return invalid(format!(
            "contraction vector has length {} but mode {mode} has extent {n}",
            v.len()
        ));
    }
    let outer: usize = t.shape[..mode].iter().product();
    let inner: usize = t.shape[mode + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    if inner == 1 {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = dot(&t.data[o * n..(o + 1) * n], v);
        }
    } else {
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (k, &vk) in v.iter().enumerate() {
                let src = &t.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * vk;
                }
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(mode);
    DenseTensor::new(shape, out)
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    l2_norm(&t.data)
}

/// Elementwise `a + alpha·b`.
pub fn add_scaled(a: &DenseTensor, b: &DenseTensor, alpha: f64) -> Result<DenseTensor> {
    if a.shape != b.shape {
        return invalid(format!("shape mismatch {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(DenseTensor {
        shape: a.shape.clone(),
        strides: a.strides.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + alpha * y).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn outer_product_examples() {
        let t = outer_product(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[3.0, 4.0, 6.0, 8.0]);

        let t = outer_product(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(t.shape(), &[1, 1, 1]);
        assert_eq!(t.data(), &[1.0]);

        let t = outer_product(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let expect = if (i, j) == (0, 1) { 2.0 } else { 0.0 };
                    assert_eq!(t[&[i, j, k][..]], expect, "entry {i}{j}{k}");
                }
            }
        }
    }

    #[test]
    fn outer_product_rejects_empty() {
        let none: [Vec<f64>; 0] = [];
        assert!(outer_product(&none).is_err());
        assert!(outer_product(&[vec![1.0], vec![]]).is_err());
    }

    #[test]
    fn mode_contract_examples() {
        let t = DenseTensor::ones(&[2, 3]);
        assert_eq!(mode_contract(&t, 1, &[1.0; 3]).unwrap().data(), &[3.0, 3.0]);

        let eye = DenseTensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mode_contract(&eye, 0, &[0.0, 1.0]).unwrap().data(), &[0.0, 1.0]);

        let t = outer_product(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mode_contract(&t, 0, &[1.0, 1.0]).unwrap().data(), &[9.0, 12.0]);
    }

    #[test]
    fn mode_contract_errors() {
        let t = DenseTensor::ones(&[2, 3]);
        assert!(mode_contract(&t, 2, &[1.0, 1.0]).is_err());
        assert!(mode_contract(&t, 0, &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn frobenius_examples() {
        assert!((frobenius_norm(&DenseTensor::ones(&[2, 3, 4])) - 24f64.sqrt()).abs() < 1e-15);
        assert_eq!(frobenius_norm(&DenseTensor::zeros(&[3, 3])), 0.0);
        let t = DenseTensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&t), 5.0);
    }

    #[test]
    fn add_scaled_examples() {
        let ones = DenseTensor::ones(&[2, 2]);
        assert_eq!(add_scaled(&ones, &ones, -1.0).unwrap(), DenseTensor::zeros(&[2, 2]));
        let t = DenseTensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 7.0]).unwrap();
        assert_eq!(add_scaled(&DenseTensor::zeros(&[2, 2]), &t, 1.0).unwrap(), t);
        let a = DenseTensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = DenseTensor::matrix(1, 2, vec![10.0, 20.0]).unwrap();
        assert_eq!(add_scaled(&a, &b, 0.5).unwrap().data(), &[6.0, 12.0]);
        assert!(add_scaled(&a, &ones, 1.0).is_err());
    }

    #[test]
    fn bounds_checked_access() {
        let t = DenseTensor::ones(&[2, 3]);
        assert_eq!(t.get(&[1, 2]), Some(1.0));
        assert_eq!(t.get(&[2, 0]), None);
        assert_eq!(t.get(&[0]), None);
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
    }

    fn small_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 1..5)
    }

    proptest! {
        #[test]
        fn rank1_norm_identity(vs in prop::collection::vec(small_vec(), 2..4)) {
            let t = outer_product(&vs).unwrap();
            let expect: f64 = vs.iter().map(|v| l2_norm(v)).product();
            let got = frobenius_norm(&t);
            prop_assert!((got - expect).abs() <= 1e-10 * expect.max(1e-300));
        }

        #[test]
        fn contraction_is_linear(
            data in prop::collection::vec(-2.0f64..2.0, 24),
            v in prop::collection::vec(-2.0f64..2.0, 3),
            w in prop::collection::vec(-2.0f64..2.0, 3),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let t = DenseTensor::new(vec![2, 3, 4], data).unwrap();
            let mix: Vec<f64> = v.iter().zip(&w).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = mode_contract(&t, 1, &mix).unwrap();
            let rv = mode_contract(&t, 1, &v).unwrap();
            let rw = mode_contract(&t, 1, &w).unwrap();
            for ((l, a), b) in lhs.data().iter().zip(rv.data()).zip(rw.data()) {
                prop_assert!((l - (alpha * a + beta * b)).abs() <= 1e-10);
            }
        }

        // Exact only where the intermediate a - b is representable, so the
        // values are drawn from integers well inside the 53-bit mantissa.
        #[test]
        fn add_then_subtract_restores(
            a in prop::collection::vec(-1_000_000i64..1_000_000, 6),
            b in prop::collection::vec(-1_000_000i64..1_000_000, 6),
        ) {
            let a = DenseTensor::new(vec![2, 3], a.into_iter().map(|x| x as f64).collect()).unwrap();
            let b = DenseTensor::new(vec![2, 3], b.into_iter().map(|x| x as f64).collect()).unwrap();
            let back = add_scaled(&add_scaled(&a, &b, -1.0).unwrap(), &b, 1.0).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
