//! Dense row-major matrices, stable softmax, norms and seeded sampling.
//!
//! Everything here is deterministic: the same inputs (and the same seed, for
//! the sampling routines) give bit-identical outputs on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix with at least one row and one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr<T>", bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Deserialize)]
struct MatrixRepr<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TryFrom<MatrixRepr<T>> for Matrix<T> {
    type Error = crate::error::Error;

    fn try_from(r: MatrixRepr<T>) -> Result<Self> {
        let m = Self::new(r.rows, r.cols, r.data)?;
        m.ensure_finite("matrix")?;
        Ok(m)
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return shape_err(format!("matrix must be non-empty, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return shape_err(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have the same length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return shape_err("no rows");
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return shape_err(format!("row {i} has {} entries, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            invalid(format!("{what} contains non-finite entries"))
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, computed as row-by-row dot products.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return shape_err(format!(
                "matmul_transposed {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut data = Vec::with_capacity(self.rows * other.rows);
        for a in self.row_iter() {
            for b in other.row_iter() {
                data.push(dot(a, b));
            }
        }
        Self::new(self.rows, other.rows, data)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn zip_with(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "elementwise {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self += factor · other`.
    pub fn axpy(&mut self, factor: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "axpy {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Stacks matrices vertically; all parts must share the column count.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("vstack of nothing");
        };
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return shape_err(format!("vstack width {} vs {cols}", p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Self::new(rows, cols, data)
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows {
            return shape_err(format!("row slice {start}..{end} of {} rows", self.rows));
        }
        Self::new(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.cols {
            return shape_err(format!("column slice {start}..{end} of {} columns", self.cols));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..end]);
        }
        Self::new(self.rows, end - start, data)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest ℓ2 norm over the rows.
    pub fn max_row_l2(&self) -> T {
        self.row_iter()
            .map(l2)
            .fold(T::zero(), |m, v| m.max(v))
    }

    /// Mean absolute entrywise difference.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "mean_abs_diff {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let total: T = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(total / T::of(self.data.len() as f64))
    }
}

impl Matrix<f64> {
    /// Lossy conversion of any scalar matrix into `f64`.
    pub fn from_scalar<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators; the summation order is fixed, so the
    // result is still deterministic.
    let mut acc = [T::zero(); 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: T = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn l1<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).sum()
}

#[inline]
pub fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Softmax of one row, written into `out`. Uses max-subtraction.
pub fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &z) in out.iter_mut().zip(row) {
        let e = (z - max).exp();
        *o = e;
        total += e;
    }
    let inv = T::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    m.ensure_finite("softmax input")?;
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let (src, dst) = (m.row(i), &mut out.data[i * m.cols..(i + 1) * m.cols]);
        softmax_into(src, dst);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norms<T> {
    pub row_l1: Vec<T>,
    pub row_l2: Vec<T>,
    pub frobenius: T,
}

pub fn norms<T: Scalar>(m: &Matrix<T>) -> Result<Norms<T>> {
    m.ensure_finite("norm input")?;
    Ok(Norms {
        row_l1: m.row_iter().map(l1).collect(),
        row_l2: m.row_iter().map(l2).collect(),
        frobenius: m.frobenius(),
    })
}

/// Deterministic generator. Child streams are addressed by
/// `(base_seed, index)` so parallel trials never share state.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream number `index` of `seed`.
    pub fn child(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `[lo, hi]` (closed at both ends up to rounding).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}

/// Matrix with i.i.d. `Normal(mean, std²)` entries.
pub fn gaussian_matrix<T: Scalar>(
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    rng: &mut SeededRng,
) -> Result<Matrix<T>> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return invalid(format!("gaussian_matrix needs finite mean and std >= 0, got ({mean}, {std})"));
    }
    if rows == 0 || cols == 0 {
        return shape_err(format!("matrix must be non-empty, got {rows}x{cols}"));
    }
    let data = (0..rows * cols)
        .map(|_| T::of(mean + std * rng.normal()))
        .collect();
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let s = row_softmax(&m(&[&[1000.0, 1000.0]])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let s = row_softmax(&m(&[&[0.0, 2f64.ln()]])).unwrap();
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(row_softmax(&m(&[&[0.0, f64::NAN]])).is_err());
        assert!(row_softmax(&m(&[&[f64::INFINITY, 0.0]])).is_err());
    }

    #[test]
    fn norm_examples() {
        let n = norms(&Matrix::<f64>::zeros(3, 2)).unwrap();
        assert_eq!(n.frobenius, 0.0);
        assert!(n.row_l1.iter().chain(&n.row_l2).all(|&v| v == 0.0));
        assert_eq!(norms(&Matrix::<f64>::identity(2)).unwrap().frobenius, 2f64.sqrt());
        let n = norms(&m(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(n.row_l1, vec![7.0]);
        assert_eq!(n.row_l2, vec![5.0]);
    }

    #[test]
    fn gaussian_examples() {
        let mut rng = SeededRng::new(7);
        let c: Matrix<f64> = gaussian_matrix(3, 4, 1.5, 0.0, &mut rng).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.5));

        let g: Matrix<f64> = gaussian_matrix(100, 100, 0.0, 1.0, &mut SeededRng::new(11)).unwrap();
        let n = g.data().len() as f64;
        let mean = g.sum() / n;
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());

        let a: Matrix<f64> = gaussian_matrix(5, 5, 0.0, 1.0, &mut SeededRng::new(3)).unwrap();
        let b: Matrix<f64> = gaussian_matrix(5, 5, 0.0, 1.0, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a.data(), b.data());

        assert!(gaussian_matrix::<f64>(2, 2, 0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn child_streams_differ_and_repeat() {
        let a = SeededRng::child(5, 0).next_u64();
        let b = SeededRng::child(5, 1).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, SeededRng::child(5, 0).next_u64());
    }

    #[test]
    fn matmul_against_naive() {
        let mut rng = SeededRng::new(1);
        let a: Matrix<f64> = gaussian_matrix(5, 7, 0.0, 1.0, &mut rng).unwrap();
        let b: Matrix<f64> = gaussian_matrix(7, 3, 0.0, 1.0, &mut rng).unwrap();
        let c = a.matmul(&b).unwrap();
        let ct = a.matmul_transposed(&b.transpose()).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let naive: f64 = (0..7).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - naive).abs() < 1e-12);
                assert!((ct.get(i, j) - naive).abs() < 1e-12);
            }
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn constructors_reject_bad_shapes() {
        assert!(Matrix::<f64>::new(0, 2, vec![]).is_err());
        assert!(Matrix::<f64>::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn f32_softmax_rows_sum_to_one() {
        let s = row_softmax(&Matrix::<f32>::from_rows(&[[1.0f32, 2.0, 3.0]]).unwrap()).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix<f64>> {
        (1usize..6, 1usize..9).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn softmax_rows_stochastic_and_shift_invariant(
            z in matrix_strategy(),
            shift in -50.0f64..50.0,
        ) {
            let s = row_softmax(&z).unwrap();
            let shifted = row_softmax(&z.map(|v| v + shift)).unwrap();
            for (i, row) in s.row_iter().enumerate() {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, b) in row.iter().zip(shifted.row(i)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn softmax_is_monotone(z in matrix_strategy()) {
            let s = row_softmax(&z).unwrap();
            for i in 0..z.rows() {
                for a in 0..z.cols() {
                    for b in 0..z.cols() {
                        if z.get(i, a) > z.get(i, b) {
                            prop_assert!(s.get(i, a) >= s.get(i, b));
                            // strict unless both underflow to the same value
                            if s.get(i, b) > 0.0 && z.get(i, a) - z.get(i, b) > 1e-12 {
                                prop_assert!(s.get(i, a) > s.get(i, b));
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn norm_sandwich(z in matrix_strategy()) {
            let n = norms(&z).unwrap();
            let root_cols = (z.cols() as f64).sqrt();
            for (a1, a2) in n.row_l1.iter().zip(&n.row_l2) {
                prop_assert!(*a2 <= *a1 * (1.0 + 1e-12));
                prop_assert!(*a1 <= root_cols * *a2 * (1.0 + 1e-12));
            }
            let fro2: f64 = z.data().iter().map(|v| v * v).sum();
            prop_assert!((n.frobenius.powi(2) - fro2).abs() <= 1e-9 * fro2.max(1.0));
        }
    }
}
