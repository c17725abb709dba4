//! Dense linear algebra and reductions shared by every stage of the pipeline.
//!
//! Storage is generic over [`Real`]; every reduction widens to `f64` and sums
//! in ascending index order, so results do not depend on thread scheduling.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{param, shape, Error, Result};

/// Guard used by every normalization when the caller does not supply one.
pub const DEFAULT_EPS: f64 = 1e-12;

/// Scalar storage type for matrices and vectors.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}

/// Dot product of two equal-length slices, accumulated in `f64`.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.widen() * y.widen();
    }
    acc
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

fn check_finite<T: Real>(data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Validation(format!("non-finite value at flat index {i}"))),
        None => Ok(()),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds from `f64` values, rounding to the storage precision.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| T::narrow(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite.
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
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
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }

    /// Column-wise mean of the rows, accumulated in `f64`.
    pub fn mean_row(&self) -> Result<Vec<f64>> {
        if self.rows == 0 {
            return Err(shape("mean of a matrix with no rows"));
        }
        let mut acc = vec![0.0f64; self.cols];
        for r in self.row_iter() {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v.widen();
            }
        }
        let n = self.rows as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector<T> {
    data: Vec<T>,
}

impl<T: Real> DenseVector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![T::zero(); dim],
        }
    }

    pub fn from_f64(data: &[f64]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::narrow(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn cast<U: Real>(&self) -> DenseVector<U> {
        DenseVector {
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }
}

/// `a × b`.
pub fn matmul<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for (k, av) in ar.iter().enumerate() {
                acc += av.widen() * b.data[k * b.cols + j].widen();
            }
            out.data[i * b.cols + j] = T::narrow(acc);
        }
    }
    Ok(out)
}

/// `a × bᵀ`, reading both operands along contiguous rows.
pub fn matmul_nt<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.cols {
        return Err(shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = T::narrow(dot(ar, b.row(j)));
        }
    }
    Ok(out)
}

/// `aᵀ × b`.
pub fn matmul_tn<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.rows != b.rows {
        return Err(shape(format!(
            "matmul_tn ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.cols {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..a.rows {
            let w = a.data[k * a.cols + i].widen();
            for (slot, bv) in acc.iter_mut().zip(b.row(k)) {
                *slot += w * bv.widen();
            }
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = T::narrow(*v);
        }
    }
    Ok(out)
}

/// Scales a slice to unit length in `f64`; vectors shorter than `eps` are divided by `eps`.
pub fn l2_normalize_f64(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    v.iter().map(|x| x / n).collect()
}

pub fn l2_normalize<T: Real>(v: &DenseVector<T>, eps: f64) -> DenseVector<T> {
    let n = v.norm().max(eps);
    DenseVector {
        data: v.data.iter().map(|x| T::narrow(x.widen() / n)).collect(),
    }
}

/// Cosine similarity of two slices.
pub fn cosine_slices<T: Real>(a: &[T], b: &[T], eps: f64) -> f64 {
    let d = dot(a, b);
    d / (norm(a) * norm(b)).max(eps)
}

pub fn cosine<T: Real>(a: &DenseVector<T>, b: &DenseVector<T>, eps: f64) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(shape(format!("cosine of dim {} and dim {}", a.dim(), b.dim())));
    }
    Ok(T::narrow(cosine_slices(&a.data, &b.data, eps)))
}

/// Temperature softmax over each row, shifted by the row maximum.
pub fn row_softmax<T: Real>(m: &DenseMatrix<T>, tau: f64) -> Result<DenseMatrix<T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(param(format!("softmax temperature must be > 0, got {tau}")));
    }
    let mut out = DenseMatrix::zeros(m.rows, m.cols);
    let mut buf = vec![0.0f64; m.cols];
    for i in 0..m.rows {
        softmax_into(m.row(i), tau, &mut buf);
        for (o, v) in out.row_mut(i).iter_mut().zip(&buf) {
            *o = T::narrow(*v);
        }
    }
    Ok(out)
}

pub(crate) fn softmax_into<T: Real>(row: &[T], tau: f64, out: &mut [f64]) {
    let max = row
        .iter()
        .map(|v| v.widen())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = ((v.widen() - max) / tau).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Descending-score order with ascending-id tie-break. Scores are finite, and
/// `-0.0` ties with `0.0`.
#[inline]
pub fn rank_order<I: Ord>(a: &(I, f64), b: &(I, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// The `min(k, n)` highest-scoring entries, descending, ties broken by ascending id.
pub fn top_k_indices<I: Ord + Clone>(scores: &[(I, f64)], k: usize) -> Result<Vec<(I, f64)>> {
    if k == 0 {
        return Err(param("top-k requires k >= 1"));
    }
    let mut all: Vec<(I, f64)> = scores.to_vec();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_unstable_by(rank_order);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::from_f64(rows, cols, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &a).unwrap(), a);
        let z = matmul(&DenseMatrix::<f64>::zeros(2, 3), &m(3, 2, &[1., 2., 3., 4., 5., 6.])).unwrap();
        assert_eq!(z, DenseMatrix::zeros(2, 2));
        let p = matmul(&a, &m(2, 2, &[5., 6., 7., 8.])).unwrap();
        assert_eq!(p.as_slice(), &[19., 22., 43., 50.]);
        assert!(matches!(matmul(&a, &DenseMatrix::zeros(3, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = m(2, 3, &[1., -2., 3., 0.5, 4., -1.]);
        let b = m(4, 3, &[1., 0., 2., -1., 1., 1., 3., 3., 0., 0.25, 0.5, 2.]);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &b.transpose()).unwrap());
        let c = m(2, 4, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(matmul_tn(&a, &c).unwrap(), matmul(&a.transpose(), &c).unwrap());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(DenseMatrix::<f32>::new(2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0f32, f32::NAN]),
            Err(Error::Validation(_))
        ));
        assert!(DenseVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&DenseVector::<f32>::from_f64(&[3., 4.]).unwrap(), DEFAULT_EPS);
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-6 && (v.as_slice()[1] - 0.8).abs() < 1e-6);
        let z = l2_normalize(&DenseVector::<f32>::zeros(2), DEFAULT_EPS);
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
        let o = l2_normalize(&DenseVector::<f64>::from_f64(&[1., 1., 1.]).unwrap(), DEFAULT_EPS);
        for x in o.as_slice() {
            assert!((x - 0.57735).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_examples() {
        let a = DenseVector::<f64>::from_f64(&[1., 0.]).unwrap();
        let b = DenseVector::<f64>::from_f64(&[0., 1.]).unwrap();
        let c = DenseVector::<f64>::from_f64(&[1., 1.]).unwrap();
        assert!((cosine(&c, &c, DEFAULT_EPS).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&a, &b, DEFAULT_EPS).unwrap(), 0.0);
        assert!((cosine(&a, &c, DEFAULT_EPS).unwrap() - FRAC_1_SQRT_2).abs() < 1e-5);
        let d3 = DenseVector::<f64>::zeros(3);
        assert!(matches!(cosine(&a, &d3, DEFAULT_EPS), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let single = m(3, 1, &[5., -2., 0.3]);
        assert!(row_softmax(&single, 0.07).unwrap().as_slice().iter().all(|&v| v == 1.0));
        assert_eq!(row_softmax(&m(1, 2, &[0., 0.]), 1.0).unwrap().as_slice(), &[0.5, 0.5]);
        let r = row_softmax(&m(1, 2, &[2f64.ln(), 0.]), 1.0).unwrap();
        assert!((r.get(0, 0) - 2.0 / 3.0).abs() < 1e-5);
        assert!((r.get(0, 1) - 1.0 / 3.0).abs() < 1e-5);
        assert!(matches!(row_softmax(&single, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(row_softmax(&single, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn top_k_examples() {
        let s = vec![("a", 0.9), ("b", 0.1), ("c", 0.5)];
        assert_eq!(top_k_indices(&s, 2).unwrap(), vec![("a", 0.9), ("c", 0.5)]);
        assert_eq!(top_k_indices(&s, 10).unwrap(), vec![("a", 0.9), ("c", 0.5), ("b", 0.1)]);
        let tie = vec![("b", 0.5), ("a", 0.5)];
        assert_eq!(top_k_indices(&tie, 1).unwrap(), vec![("a", 0.5)]);
        assert!(matches!(top_k_indices(&s, 0), Err(Error::Parameter(_))));
    }

    fn matrix_strategy() -> impl Strategy<Value = DenseMatrix<f64>> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |d| DenseMatrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(mat in matrix_strategy(), tau in 0.05f64..4.0, shift in -10.0f64..10.0) {
            let s = row_softmax(&mat, tau).unwrap();
            for r in s.row_iter() {
                let sum: f64 = r.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                prop_assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
            let shifted = DenseMatrix::new(mat.rows(), mat.cols(),
                mat.as_slice().iter().map(|v| v + shift).collect()).unwrap();
            let s2 = row_softmax(&shifted, tau).unwrap();
            for (a, b) in s.as_slice().iter().zip(s2.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn matmul_is_bitwise_repeatable(a in matrix_strategy()) {
            let at = a.transpose();
            let x = matmul(&a, &at).unwrap();
            let y = matmul(&a, &at).unwrap();
            prop_assert_eq!(x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            y.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn cosine_ignores_scale(a in proptest::collection::vec(-3.0f64..3.0, 4),
                                b in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let a = DenseVector::new(a).unwrap();
            let b = DenseVector::new(b).unwrap();
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let raw = cosine(&a, &b, DEFAULT_EPS).unwrap();
            let unit = cosine(&l2_normalize(&a, DEFAULT_EPS), &l2_normalize(&b, DEFAULT_EPS), DEFAULT_EPS).unwrap();
            prop_assert!((raw - unit).abs() < 1e-5);
            prop_assert!(raw.abs() <= 1.0 + 1e-6);
        }

        #[test]
        fn full_top_k_is_sorted_permutation(vals in proptest::collection::vec(-1.0f64..1.0, 1..40)) {
            // Quantize to force ties.
            let scores: Vec<(usize, f64)> = vals.iter().enumerate()
                .map(|(i, v)| (i, (v * 4.0).round() / 4.0)).collect();
            let out = top_k_indices(&scores, scores.len()).unwrap();
            let mut ids: Vec<usize> = out.iter().map(|p| p.0).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..scores.len()).collect::<Vec<_>>());
            for w in out.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
        }
    }
}
