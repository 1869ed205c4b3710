//! Dense row-major f64 tensors.
//!
//! Shapes are restricted to what the objectives need: scalars (shape `[1]`),
//! vectors (`[n]`) and matrices (`[n, m]`). All arithmetic is 64-bit;
//! finite-difference checks at 1e-4 tolerance are unreliable in 32-bit.

use crate::{Error, Result};

/// A dense real-valued array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the shape covers the data exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for tensors holding exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor. Panics if the tensor is larger.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    /// Row count when the tensor is viewed as a matrix; vectors are one row.
    pub fn view_rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count under the same matrix view.
    pub fn view_cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.data.len(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.view_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_in_place(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// C = A @ B for matrices (n,k) x (k,m).
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// C = A^T @ B for A (k,n), B (k,m) -> (n,m).
pub(crate) fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// C = A @ B^T for A (n,k), B (m,k) -> (n,m).
pub(crate) fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[0];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// Numerically stable log(sum(exp(x))) over a slice via max-subtraction.
///
/// Finite for inputs up to magnitude ~1e300; the energy fine-tuning method
/// drives OOD logits upward, so naive exp would overflow.
pub fn logsumexp_slice(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Stable softmax over a slice.
pub fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let lse = logsumexp_slice(values);
    values.iter().map(|&v| (v - lse).exp()).collect()
}

/// Stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable at both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_matmuls_agree_with_explicit_transpose() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 1.0, 0.0, 3.0]).unwrap();
        // A^T @ B
        let atb = matmul_at_b(&a, &b);
        let at = Tensor::matrix(2, 3, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(atb, matmul(&at, &b));
        // A @ B^T
        let abt = matmul_a_bt(&a, &b);
        let bt = Tensor::matrix(2, 3, vec![1.0, 2.0, 0.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(abt, matmul(&a, &bt));
    }

    #[test]
    fn logsumexp_is_stable_for_huge_logits() {
        let v = logsumexp_slice(&[1e4, 1e4]);
        assert!(v.is_finite());
        assert!((v - (1e4 + 2.0f64.ln())).abs() < 1e-9);
        assert!(logsumexp_slice(&[-1e4, -1e4]).is_finite());
    }

    #[test]
    fn sigmoid_and_softplus_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert!(softplus(800.0).is_finite());
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
    }
}
