//! Dense row-major `f32` tensors and the numeric kernels the decoder is built
//! from. Reductions (dot products, softmax sums, normalization statistics)
//! accumulate in `f64`.
//!
//! Every row-wise kernel processes each output row with the same instruction
//! sequence regardless of how many rows the input has, so deleting a row of
//! the left operand leaves every other output row bit-identical.

mod graph;

pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Glorot-uniform initialized `fan_in x fan_out` matrix.
    pub fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix; a vector is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with the listed rows removed (indices into the current rows).
    pub fn without_rows(&self, drop: &[usize]) -> Tensor {
        let keep: Vec<usize> = (0..self.rows()).filter(|r| !drop.contains(r)).collect();
        self.select_rows(&keep)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        if shape.len() >= 2 {
            shape[0] = rows.len();
        } else {
            shape = vec![rows.len(), c];
        }
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
            grad: None,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        out.grad = None;
        let c = self.cols();
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
        out
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let n = self.cols();
        if n < 2 || gain.len() != n || bias.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape, gain.shape, bias.shape),
            ));
        }
        let mut out = vec![0.0; self.len()];
        for (src, dst) in self.data.chunks(n).zip(out.chunks_mut(n)) {
            let (mean, rstd) = row_stats(src);
            for j in 0..n {
                let xhat = (f64::from(src[j]) - mean) * rstd;
                dst[j] = (xhat * f64::from(gain.data[j]) + f64::from(bias.data[j])) as f32;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}

/// Register-blocked `f64`-accumulating product. `a_at(i, p)` reads the
/// left operand, `b` is the right operand as `k x n` in `f64`, and `store`
/// receives every finished output element once. Each output element is a
/// sequential sum over `p`, so its value depends only on its own row of the
/// left operand.
#[inline(always)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a_at: impl Fn(usize, usize) -> f32,
    b: &[f64],
    mut store: impl FnMut(usize, usize, f64),
) {
    const R: usize = 4;
    const C: usize = 4;
    let mut i0 = 0;
    while i0 < m {
        let rows = R.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let cols = C.min(n - j0);
            if rows == R && cols == C {
                let mut acc = [[0.0f64; C]; R];
                for p in 0..k {
                    let bp: &[f64; C] = b[p * n + j0..p * n + j0 + C].try_into().unwrap();
                    for (r, acc_r) in acc.iter_mut().enumerate() {
                        let av = f64::from(a_at(i0 + r, p));
                        for c in 0..C {
                            acc_r[c] += av * bp[c];
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    for (c, &v) in acc_r.iter().enumerate() {
                        store(i0 + r, j0 + c, v);
                    }
                }
            } else {
                for r in 0..rows {
                    for c in 0..cols {
                        let mut v = 0.0f64;
                        for p in 0..k {
                            v += f64::from(a_at(i0 + r, p)) * b[p * n + j0 + c];
                        }
                        store(i0 + r, j0 + c, v);
                    }
                }
            }
            j0 += C;
        }
        i0 += R;
    }
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

/// `out[m x n] = a[m x k] * b[k x n]` with `f64` accumulation.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let bw = widen(&b[..k * n]);
    gemm(m, k, n, |i, p| a[i * k + p], &bw, |i, j, v| out[i * n + j] = v as f32);
}

/// `out[m x n] = a[m x k] * b[n x k]^T`.
pub(crate) fn matmul_bt_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0f64; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = f64::from(b[j * k + p]);
        }
    }
    gemm(m, k, n, |i, p| a[i * k + p], &bt, |i, j, v| out[i * n + j] = v as f32);
}

/// `out[m x n] += a[k x m]^T * b[k x n]`; used for weight gradients.
pub(crate) fn matmul_at_acc(a: &[f32], b: &[f32], out: &mut [f32], k: usize, m: usize, n: usize) {
    let bw = widen(&b[..k * n]);
    gemm(m, k, n, |i, p| a[p * m + i], &bw, |i, j, v| out[i * n + j] += v as f32);
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += f64::from(*v);
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (f64::from(*v) * inv) as f32;
    }
}

/// Mean and reciprocal standard deviation of one row.
pub(crate) fn row_stats(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(id.matmul(&b).unwrap().data(), b.data());

        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let c = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for p in 0..4 {
                    s += f64::from(a.at(i, p)) * f64::from(b.at(p, j));
                }
                assert!((f64::from(c.at(i, j)) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("[2, 3] x [2, 3]"));
    }

    #[test]
    fn transposed_kernels_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng);
        let mut out = vec![0.0; 20];
        matmul_bt_into(a.data(), b.data(), &mut out, 4, 6, 5);
        let expect = a.matmul(&b.transpose()).unwrap();
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-6);
        }

        let c = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let mut out = vec![0.0; 18];
        matmul_at_acc(a.data(), c.data(), &mut out, 4, 6, 3);
        let expect = a.transpose().matmul(&c).unwrap();
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap().softmax_rows();
        assert_eq!(t.data(), &[0.5, 0.5]);

        let t = Tensor::matrix(1, 3, vec![1000.0; 3]).unwrap().softmax_rows();
        for v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }

        let t = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap().softmax_rows();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, v) in t.data().iter().enumerate() {
            let oracle = ((i + 1) as f64).exp() / z;
            assert!((f64::from(*v) - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let gain = Tensor::filled(&[4], 1.0);
        let bias = Tensor::zeros(&[4]);
        let x = Tensor::matrix(1, 4, vec![2.5; 4]).unwrap();
        assert!(x.layer_norm(&gain, &bias).unwrap().data().iter().all(|&v| v == 0.0));

        let gain2 = Tensor::filled(&[2], 1.0);
        let bias2 = Tensor::zeros(&[2]);
        let y = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let out = y.layer_norm(&gain2, &bias2).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((f64::from(out.data()[0]) - expect).abs() < 1e-6);
        assert!((f64::from(out.data()[1]) + expect).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::uniform(&[3, 8], -3.0, 3.0, &mut rng);
        let gain8 = Tensor::filled(&[8], 1.0);
        let bias8 = Tensor::zeros(&[8]);
        let out = z.layer_norm(&gain8, &bias8).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = out.row(r).iter().map(|&v| f64::from(v)).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_requires_two_columns() {
        let x = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(x.layer_norm(&Tensor::scalar(1.0), &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn row_deletion_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Tensor::uniform(&[7, 5], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(&[5, 6], -2.0, 2.0, &mut rng);
        let full = a.matmul(&b).unwrap();
        for drop in 0..7 {
            let part = a.without_rows(&[drop]).matmul(&b).unwrap();
            let expect = full.without_rows(&[drop]);
            assert_eq!(part.data(), expect.data());
        }
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
