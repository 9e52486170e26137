//! Dense `f32` tensors and the numeric kernels shared by the autodiff tape.
//!
//! All reductions run sequentially in row-major order so that a run repeated
//! with the same inputs produces bit-identical values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{dim_err, Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Build a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples from N(0, std²) with a seeded generator.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0f32, std.max(0.0)).expect("finite std");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self { shape, data }
    }

    /// Samples uniformly from `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, seed: u64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(lo, hi);
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Self { shape, data }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(dim_err!("expected a matrix, got shape {:?}", s)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|x| x * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn get2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.last_dim() + c]
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatView::new(&self.data, m, k),
            MatView::new(&other.data, k, n),
            &mut out,
            false,
        );
        Tensor::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new([c, r], out)
    }

    /// Euclidean norm over every element.
    pub fn l2_norm(&self) -> f32 {
        l2_norm(&self.data)
    }
}

/// Square root of the sum of squares, accumulated in double precision.
pub fn l2_norm(values: &[f32]) -> f32 {
    values
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt() as f32
}

/// Strided view of a matrix, so transposes cost nothing.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn maybe_t(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }
}

/// `out (+)= a · b` for row-major `out`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, out: &mut [f32], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: extents and strides describe memory inside the borrowed slices
    // (checked above and by MatView construction); `out` does not alias inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax over the trailing axis, stabilized by max subtraction.
pub(crate) fn softmax_rows(data: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (d, &x) in dst.iter_mut().zip(row) {
            let e = (x - max).exp();
            *d = e;
            total += f64::from(e);
        }
        let inv = (1.0 / total) as f32;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Plain softmax over the last axis of `x`.
pub fn softmax(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: softmax_rows(&x.data, x.last_dim()),
    }
}

/// Elementwise `max(x, 0)²`.
pub fn squared_relu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let r = v.max(0.0);
        r * r
    })
}

/// Per-row statistics cached by the layer-norm kernel.
pub(crate) struct NormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn layer_norm_kernel(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    eps: f32,
) -> (Vec<f32>, NormStats) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mu = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mu;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let r = 1.0 / (var + f64::from(eps)).sqrt();
        let (mu, r) = (mu as f32, r as f32);
        for j in 0..d {
            dst[j] = (row[j] - mu) * r * gain[j] + bias[j];
        }
        mean.push(mu);
        rstd.push(r);
    }
    (out, NormStats { mean, rstd })
}

/// Layer normalization over the trailing axis with affine gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if d < 2 {
        return Err(dim_err!("layer norm needs at least 2 features, got {d}"));
    }
    if gain.len() != d || bias.len() != d {
        return Err(dim_err!(
            "layer norm affine params of length {}/{} for width {d}",
            gain.len(),
            bias.len()
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer norm eps must be > 0, got {eps}"
        )));
    }
    let (data, _) = layer_norm_kernel(&x.data, &gain.data, &bias.data, eps);
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Warm-startable power iteration for the top singular value of a matrix.
///
/// Holds the current left/right singular-vector estimates so that repeated
/// refreshes across training steps converge in a handful of iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl PowerIteration {
    pub const DEFAULT_ITERS: usize = 16;
    pub const DEFAULT_TOL: f32 = 1e-5;

    /// Deterministic start vectors for an `rows × cols` matrix.
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut rng =
            ChaCha8Rng::seed_from_u64(0x005e_ed0f_u64 ^ (rows as u64) << 20 ^ cols as u64);
        let dist = Normal::new(0.0f64, 1.0).unwrap();
        let v: Vec<f64> = (0..cols).map(|_| dist.sample(&mut rng)).collect();
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        Self {
            u: vec![0.0; rows],
            v: v.iter().map(|x| (x / norm) as f32).collect(),
        }
    }

    /// Runs up to `iters` alternating updates, stopping once successive
    /// estimates differ by less than `tol`. Returns the estimate, 0 for a
    /// zero matrix.
    pub fn refresh(&mut self, w: &Tensor, iters: usize, tol: f32) -> Result<f32> {
        let (m, n) = w.dims2()?;
        if self.u.len() != m || self.v.len() != n {
            return Err(dim_err!(
                "power iteration state {}x{} for matrix {m}x{n}",
                self.u.len(),
                self.v.len()
            ));
        }
        if iters == 0 {
            return Err(Error::Config("power iteration needs iters >= 1".into()));
        }
        let w = w.data();
        let mut v: Vec<f64> = self.v.iter().map(|&x| f64::from(x)).collect();
        let mut u = vec![0.0f64; m];
        let mut prev = f64::NAN;
        let mut sigma = 0.0;
        for _ in 0..iters {
            for (i, ui) in u.iter_mut().enumerate() {
                let row = &w[i * n..(i + 1) * n];
                *ui = row.iter().zip(&v).map(|(&a, b)| f64::from(a) * b).sum();
            }
            let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if un == 0.0 {
                return Ok(0.0);
            }
            u.iter_mut().for_each(|x| *x /= un);
            v.iter_mut().for_each(|x| *x = 0.0);
            for (i, &ui) in u.iter().enumerate() {
                let row = &w[i * n..(i + 1) * n];
                for (vj, &a) in v.iter_mut().zip(row) {
                    *vj += f64::from(a) * ui;
                }
            }
            sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if sigma == 0.0 {
                return Ok(0.0);
            }
            v.iter_mut().for_each(|x| *x /= sigma);
            if (sigma - prev).abs() < f64::from(tol) {
                break;
            }
            prev = sigma;
        }
        self.u = u.iter().map(|&x| x as f32).collect();
        self.v = v.iter().map(|&x| x as f32).collect();
        Ok(sigma as f32)
    }

    /// `uᵀ W v` with the stored vectors; the quantity differentiated by the
    /// reparameterized linear layers.
    pub fn rayleigh(&self, w: &Tensor) -> f64 {
        let n = self.v.len();
        self.u
            .iter()
            .enumerate()
            .map(|(i, &ui)| {
                let row = &w.data()[i * n..(i + 1) * n];
                f64::from(ui)
                    * row
                        .iter()
                        .zip(&self.v)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>()
            })
            .sum()
    }
}

/// Largest singular value of `w` by power iteration on `wᵀw`.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f32) -> Result<f32> {
    let (m, n) = w.dims2()?;
    PowerIteration::new(m, n).refresh(w, iters, tol)
}

/// Central-difference gradient of a scalar function.
///
/// The divisor uses the actually representable step `(x+h) − (x−h)` to
/// avoid rounding bias in `f32`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Config(format!(
            "finite difference step must be > 0, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data[i];
        let (hi, lo) = (orig + h, orig - h);
        probe.data[i] = hi;
        let f_hi = f(&probe);
        probe.data[i] = lo;
        let f_lo = f(&probe);
        probe.data[i] = orig;
        grad.push(((f_hi - f_lo) / f64::from(hi - lo)) as f32);
    }
    Tensor::new(x.shape.clone(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += f64::from(a.get2(i, p)) * f64::from(b.get2(p, j));
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let a = Tensor::uniform([7, 5], -1.0, 1.0, 1);
        let b = Tensor::uniform([5, 3], -1.0, 1.0, 2);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*g) - e).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full([1, 6], 3.5);
        let y = layer_norm(&x, &Tensor::ones([6]), &Tensor::zeros([6]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let x = Tensor::from_rows(&[&[1.0, 3.0]]);
        let y = layer_norm(&x, &Tensor::ones([2]), &Tensor::zeros([2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics() {
        let x = Tensor::uniform([32, 64], -3.0, 5.0, 9);
        let y = layer_norm(&x, &Tensor::ones([64]), &Tensor::zeros([64]), 1e-5).unwrap();
        for row in y.data().chunks(64) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / 64.0;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / 64.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_degenerate_width() {
        let x = Tensor::zeros([3, 1]);
        assert!(layer_norm(&x, &Tensor::ones([1]), &Tensor::zeros([1]), 1e-5).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax(&Tensor::zeros([1, 4]));
        assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
        let s = softmax(&Tensor::from_rows(&[&[2f32.ln(), 0.0]]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_saturates_at_large_magnitude() {
        let x = Tensor::uniform([1, 16], -0.5, 0.5, 42).scale(40.0);
        let s = softmax(&x);
        let max = s.data().iter().copied().fold(0.0, f32::max);
        assert!(max > 0.99, "max weight {max}");
    }

    #[test]
    fn squared_relu_values() {
        let x = Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(squared_relu(&x).data(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn norms() {
        assert_eq!(Tensor::new([2], vec![3.0, 4.0]).unwrap().l2_norm(), 5.0);
        assert_eq!(Tensor::zeros([5, 5]).l2_norm(), 0.0);
        let x = Tensor::uniform([1000], -2.0, 2.0, 4);
        let naive = x
            .data()
            .iter()
            .fold(0.0f64, |acc, &v| acc + f64::from(v) * f64::from(v))
            .sqrt();
        assert!((f64::from(x.l2_norm()) - naive).abs() / naive < 1e-4);
    }

    #[test]
    fn spectral_norm_known_matrices() {
        let d = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]);
        assert!((spectral_norm(&d, 200, 1e-7).unwrap() - 2.0).abs() < 1e-5);
        assert!((spectral_norm(&Tensor::eye(4), 16, 1e-5).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(
            spectral_norm(&Tensor::zeros([3, 2]), 16, 1e-5).unwrap(),
            0.0
        );
        assert!(spectral_norm(&d, 0, 1e-5).is_err());
    }

    #[test]
    fn power_iteration_warm_start_converges_faster() {
        let w = Tensor::uniform([12, 9], -1.0, 1.0, 11);
        let exact = spectral_norm(&w, 5000, 1e-9).unwrap();
        let mut pi = PowerIteration::new(12, 9);
        for _ in 0..40 {
            pi.refresh(&w, 4, 0.0).unwrap();
        }
        let est = pi.refresh(&w, 1, 0.0).unwrap();
        assert!((est - exact).abs() < 1e-4);
        assert!((pi.rayleigh(&w) as f32 - exact).abs() < 1e-4);
    }

    #[test]
    fn finite_difference_of_sum_of_squares() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(
            |t| t.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum(),
            &x,
            1e-3,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-4);
        assert!((g.data()[1] - 4.0).abs() < 1e-4);
        let zero = finite_diff_grad(|_| 7.0, &x, 1e-3).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }
}
