//! Dense row-major f64 tensors and the forward kernels shared by the tape.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Dense row-major array of f64. Immutable once built; all operations return
/// new tensors.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Build an `m x n` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Standard-normal tensor from the `(seed, Raw, 0)` ChaCha8 stream.
    pub fn seeded_randn(shape: &[usize], seed: u64) -> Self {
        let len = shape.iter().product();
        let data = rng::normal_vec(&mut rng::stream(seed, Domain::Raw, 0), len);
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        // Scalar broadcast on either side.
        if other.is_scalar() && other.rank() == 0 {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.is_scalar() && self.rank() == 0 {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_scalar(&self, k: f64) -> Self {
        self.map(|x| x + k)
    }

    pub fn sin(&self) -> Self {
        self.map(f64::sin)
    }

    pub fn cos(&self) -> Self {
        self.map(f64::cos)
    }

    pub fn square(&self) -> Self {
        self.map(|x| x * x)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality including the sign of zero.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: vec![m, n],
            data: matmul_kernel(&self.data, &other.data, m, k, n),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        Ok(Self {
            shape: vec![n, m],
            data: transpose_kernel(&self.data, m, n),
        })
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        let (_, n) = self.require_matrix("softmax_rows")?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn rms_norm(&self, eps: f64) -> Result<Self> {
        let (_, n) = self.require_matrix("rms_norm")?;
        if !(eps > 0.0) {
            return Err(Error::invalid("rms_norm eps must be positive"));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            let inv = rms_inv(row, eps);
            row.iter_mut().for_each(|x| *x *= inv);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Multiply row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Self> {
        let (m, n) = self.require_matrix("scale_rows")?;
        if factors.len() != m {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.shape.clone(),
                rhs: vec![factors.len()],
            });
        }
        let mut data = self.data.clone();
        for (row, &f) in data.chunks_mut(n).zip(factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn with_row(&self, i: usize, values: &[f64]) -> Result<Self> {
        let (m, n) = self.require_matrix("with_row")?;
        if i >= m || values.len() != n {
            return Err(Error::invalid(format!("row {i} of length {} does not fit {m}x{n}", values.len())));
        }
        let mut data = self.data.clone();
        data[i * n..(i + 1) * n].copy_from_slice(values);
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Swap in a permuted row order: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let (m, _) = self.require_matrix("permute_rows")?;
        if perm.len() != m {
            return Err(Error::invalid("permutation length"));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| self.row(p).to_vec()).collect();
        Self::from_rows(&rows)
    }
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: k x m`, `b: k x n`.
pub(crate) fn matmul_tn_kernel(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: m x k`, `b: n x k`.
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn transpose_kernel(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

pub(crate) fn rms_inv(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let i = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(i.matmul(&b).unwrap(), b);
        let r = mat(&[&[1.0, 2.0]]).matmul(&mat(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let s = Tensor::new(vec![2], vec![0.0, std::f64::consts::FRAC_PI_2]).unwrap().sin();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 1.0).abs() < 1e-15);
        assert!(a.add(&Tensor::zeros(&[3])).is_err());
        assert_eq!(a.mul(&Tensor::scalar(3.0)).unwrap().data(), &[3.0, 6.0]);
    }

    #[test]
    fn softmax_cases() {
        let s = mat(&[&[0.0, 0.0, 0.0]]).softmax_rows().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = mat(&[&[1000.0, 1000.0]]).softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn rms_norm_cases() {
        let z = mat(&[&[0.0, 0.0, 0.0]]).rms_norm(1e-6).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
        let r = mat(&[&[3.0, 4.0]]).rms_norm(1e-300).unwrap();
        let d = 12.5f64.sqrt();
        assert!((r.data()[0] - 3.0 / d).abs() < 1e-15);
        assert!((r.data()[1] - 4.0 / d).abs() < 1e-15);
        assert!(mat(&[&[1.0]]).rms_norm(0.0).is_err());
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn seeded_randn_is_deterministic() {
        let a = Tensor::seeded_randn(&[4, 4], 3);
        assert!(a.bit_eq(&Tensor::seeded_randn(&[4, 4], 3)));
        assert!(!a.bit_eq(&Tensor::seeded_randn(&[4, 4], 4)));
    }
}
