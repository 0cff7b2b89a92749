use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
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
            m[(i, i)] = T::one();
        }
        m
    }

    /// Wraps row-major `data`; rejects wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    format!("row {i} of length {cols}"),
                    format!("length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
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

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · rhs`, accumulating each output entry in increasing `k` order.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("rhs rows {}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                format!("lhs rows == rhs rows ({})", self.rows),
                format!("rhs rows {}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = rhs.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                format!("lhs cols == rhs cols ({})", self.cols),
                format!("rhs cols {}", rhs.cols),
            ));
        }
        Ok(Self::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for v in &mut self.data {
            *v = *v * alpha;
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn add_diagonal(&mut self, value: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] = self[(i, i)] + value;
        }
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .fold(T::zero(), |acc, v| acc + v)
    }

    pub fn frobenius_norm(&self) -> T {
        l2_norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Column-wise arithmetic mean of the rows.
    pub fn column_means(&self) -> Vec<T> {
        let mut mean = vec![T::zero(); self.cols];
        for row in self.row_iter() {
            axpy(T::one(), row, &mut mean);
        }
        if self.rows > 0 {
            let n = T::count(self.rows);
            for v in &mut mean {
                *v = *v / n;
            }
        }
        mean
    }

    /// Lossless or lossy element conversion between scalar types.
    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Cholesky factor `L` (lower triangular) with `L·Lᵀ = a`.
pub fn cholesky<T: Scalar>(a: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("square matrix", format!("{:?}", a.shape())));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                row: j,
                pivot: d.as_f64(),
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// `y += alpha · x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix<f64> {
        DenseMatrix::from_vec(rows, cols, rng.standard_normal(rows * cols)).unwrap()
    }

    fn naive_matmul(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.as_slice()[i * a.cols() + k] * b.as_slice()[k * b.cols() + j];
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&DenseMatrix::<f64>::identity(3)).unwrap();
        assert_eq!(l, DenseMatrix::identity(3));
    }

    #[test]
    fn cholesky_diagonal() {
        let a = DenseMatrix::from_rows(&[[4.0, 0.0], [0.0, 9.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(l.as_slice(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = SeededRng::new(11);
        for n in [1, 2, 5, 16, 64] {
            let m = random_matrix(&mut rng, n, n);
            let mut a = m.t_matmul(&m).unwrap();
            a.add_diagonal(1.0);
            let l = cholesky(&a).unwrap();
            let rec = l.matmul_t(&l).unwrap();
            let mut diff = rec.clone();
            diff.axpy(-1.0, &a).unwrap();
            assert!(diff.frobenius_norm() / a.frobenius_norm() < 1e-8, "n={n}");
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn cholesky_of_product_recovers_factor() {
        let mut rng = SeededRng::new(3);
        for n in [2, 4, 9] {
            let l = DenseMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    0.5 + rng.uniform()
                } else if j < i {
                    rng.uniform() - 0.5
                } else {
                    0.0
                }
            });
            let a = l.matmul_t(&l).unwrap();
            let back = cholesky(&a).unwrap();
            assert!(back.max_abs_diff(&l) < 1e-8);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&a),
            Err(Error::NotPositiveDefinite { row: 1, .. })
        ));
        let z = DenseMatrix::<f64>::zeros(2, 2);
        assert!(matches!(
            cholesky(&z),
            Err(Error::NotPositiveDefinite { row: 0, .. })
        ));
    }

    #[test]
    fn cholesky_works_in_f32() {
        let a = DenseMatrix::<f32>::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let rec = l.matmul_t(&l).unwrap();
        assert!(rec.max_abs_diff(&a) < 1e-6);
    }

    #[test]
    fn l2_norm_three_four() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
    }

    #[test]
    fn matmul_identity_and_naive_oracle() {
        let mut rng = SeededRng::new(5);
        let a = random_matrix(&mut rng, 5, 5);
        assert_eq!(a.matmul(&DenseMatrix::identity(5)).unwrap(), a);
        let b = random_matrix(&mut rng, 5, 5);
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.as_slice().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = random_matrix(&mut rng, 5, 3);
        let tm = a.t_matmul(&c).unwrap();
        let oracle = naive_matmul(&a.transpose(), &c);
        for (x, y) in tm.as_slice().iter().zip(oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        let mt = c.transpose().matmul_t(&a).unwrap();
        let oracle = naive_matmul(&c.transpose(), &a.transpose());
        for (x, y) in mt.as_slice().iter().zip(oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
        let mut b = DenseMatrix::<f64>::zeros(3, 2);
        assert!(matches!(b.axpy(1.0, &a), Err(Error::ShapeMismatch { .. })));
        assert!(DenseMatrix::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            DenseMatrix::from_vec(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn axpy_and_transpose() {
        let mut y = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let x = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        y.axpy(2.0, &x).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(y.transpose().as_slice(), &[3.0, 5.0, 4.0, 6.0]);
    }
}
