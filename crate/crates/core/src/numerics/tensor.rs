use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// An empty shape denotes a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        }
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("{:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Number of rows when viewed as `[rows, last_axis]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

/// `c = a · b` (+ `c` when `accumulate`), all row-major, `a: [m,k]`, `b: [k,n]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: as in `gemm`; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += aᵀ · b` with `a: [k,m]`, `b: [k,n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: as in `gemm`; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a: [.., k]` (leading axes flattened) with `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() != 2 || a.cols() != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, &b.data, &mut out, false);
    let mut shape = a.shape.clone();
    *shape.last_mut().expect("rank >= 2") = n;
    Tensor::new(shape, out)
}

/// Matrix-vector product `x · w` for a single row `x: [k]`, `w: [k, n]`.
pub fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.cols();
    debug_assert_eq!(x.len() * n, w.len());
    let mut out = vec![0.0; n];
    for (xi, wrow) in x.iter().zip(w.data.chunks_exact(n)) {
        if *xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
    out
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("transpose", format!("{:?} is not 2-D", a.shape)));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Row-wise RMS normalization with a learnable gain on the last axis.
pub fn rms_norm_rows(x: &Tensor, gain: &[f64], eps: f64) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(c) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![], vec![4.0]).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);
    }

    #[test]
    fn transposed_gemm_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![3.0, 0.0]]).unwrap();
        let ab = matmul(&a, &b).unwrap();
        let bt = transpose2(&b).unwrap();
        let mut c = vec![0.0; 4];
        gemm_nt(2, 3, 2, a.data(), bt.data(), &mut c);
        assert_eq!(c, ab.data());
        let at = transpose2(&a).unwrap();
        let mut c = vec![0.0; 4];
        gemm_tn(2, 3, 2, at.data(), b.data(), &mut c);
        assert_eq!(c, ab.data());
        assert_eq!(vecmat(a.row(1), &b), ab.row(1).to_vec());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_activations() {
        assert_eq!(silu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }
}
