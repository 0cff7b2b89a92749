//! Multi-bandwidth Gaussian kernels, class-conditioned MMD and the contrastive
//! domain discrepancy (CDD) with its gradient w.r.t. target features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{squared_distance, DenseMatrix, Scalar};

/// Bandwidth multipliers applied to the median-heuristic base bandwidth.
pub const DEFAULT_BANDWIDTH_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Rows used by [`median_bandwidth`] at most.
pub const MEDIAN_SUBSAMPLE: usize = 1000;

const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Mean of Gaussian kernels `exp(−‖a−b‖² / (2σ²))` over `bandwidths`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec<T> {
    bandwidths: Vec<T>,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn new(bandwidths: Vec<T>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bandwidths must be a nonempty list of positive values, got {bandwidths:?}"
            )));
        }
        Ok(Self { bandwidths })
    }

    /// `base · scale` for every scale.
    pub fn scaled(base: T, scales: &[f64]) -> Result<Self> {
        Self::new(scales.iter().map(|&s| base * T::lit(s)).collect())
    }

    pub fn bandwidths(&self) -> &[T] {
        &self.bandwidths
    }

    /// `(k(a, b), c)` with `∂k/∂a = c · (a − b)`.
    #[inline]
    fn value_and_slope(&self, a: &[T], b: &[T]) -> (T, T) {
        let d2 = squared_distance(a, b);
        let two = T::lit(2.0);
        let mut value = T::zero();
        let mut slope = T::zero();
        for &s in &self.bandwidths {
            let s2 = s * s;
            let e = (-d2 / (two * s2)).exp();
            value = value + e;
            slope = slope - e / s2;
        }
        let nb = T::count(self.bandwidths.len());
        (value / nb, slope / nb)
    }
}

pub fn kernel_eval<T: Scalar>(spec: &KernelSpec<T>, a: &[T], b: &[T]) -> T {
    spec.value_and_slope(a, b).0
}

/// Median pairwise Euclidean distance over an evenly strided subsample of at
/// most [`MEDIAN_SUBSAMPLE`] rows, floored at `1e-6`.
pub fn median_bandwidth<T: Scalar>(rows: &DenseMatrix<T>) -> T {
    let n = rows.rows();
    let floor = T::lit(BANDWIDTH_FLOOR);
    if n < 2 {
        return floor;
    }
    let idx: Vec<usize> = if n <= MEDIAN_SUBSAMPLE {
        (0..n).collect()
    } else {
        (0..MEDIAN_SUBSAMPLE).map(|i| i * n / MEDIAN_SUBSAMPLE).collect()
    };
    let mut d = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            d.push(squared_distance(rows.row(i), rows.row(j)).sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 {
        d[mid]
    } else {
        (d[mid - 1] + d[mid]) / T::lit(2.0)
    };
    med.max(floor)
}

fn mean_kernel<T: Scalar>(spec: &KernelSpec<T>, x: &DenseMatrix<T>, y: &DenseMatrix<T>) -> T {
    let mut total = T::zero();
    for a in x.row_iter() {
        for b in y.row_iter() {
            total = total + spec.value_and_slope(a, b).0;
        }
    }
    total / T::count(x.rows() * y.rows())
}

/// Biased class-conditioned MMD between `n_b` surrogate rows and `n_b` target rows.
pub fn mmd_pair<T: Scalar>(
    surrogate: &DenseMatrix<T>,
    target: &DenseMatrix<T>,
    spec: &KernelSpec<T>,
) -> Result<T> {
    if surrogate.rows() == 0 || surrogate.shape() != target.shape() {
        return Err(Error::shape(
            format!("{:?} (nonempty)", surrogate.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let ss = mean_kernel(spec, surrogate, surrogate);
    let tt = mean_kernel(spec, target, target);
    let st = mean_kernel(spec, surrogate, target);
    Ok(ss + tt - T::lit(2.0) * st)
}

/// One CDD mini-batch: `per_class` target and surrogate rows for each class of
/// the subset, stored class-block by class-block in `classes` order.
#[derive(Debug, Clone, PartialEq)]
pub struct CddBatch<T> {
    pub classes: Vec<usize>,
    pub per_class: usize,
    /// `(|C'| · n_b) × m`.
    pub target: DenseMatrix<T>,
    /// `(|C'| · n_b) × m`.
    pub surrogate: DenseMatrix<T>,
}

impl<T: Scalar> CddBatch<T> {
    pub fn new(
        classes: Vec<usize>,
        per_class: usize,
        target: DenseMatrix<T>,
        surrogate: DenseMatrix<T>,
    ) -> Result<Self> {
        let rows = classes.len() * per_class;
        if per_class == 0 || target.rows() != rows || target.shape() != surrogate.shape() {
            return Err(Error::shape(
                format!("{rows} rows on each side"),
                format!("target {:?}, surrogate {:?}", target.shape(), surrogate.shape()),
            ));
        }
        Ok(Self {
            classes,
            per_class,
            target,
            surrogate,
        })
    }

    fn block(m: &DenseMatrix<T>, c: usize, n: usize) -> DenseMatrix<T> {
        let idx: Vec<usize> = (c * n..(c + 1) * n).collect();
        m.select_rows(&idx).expect("block in range")
    }

    pub fn target_block(&self, c: usize) -> DenseMatrix<T> {
        Self::block(&self.target, c, self.per_class)
    }

    pub fn surrogate_block(&self, c: usize) -> DenseMatrix<T> {
        Self::block(&self.surrogate, c, self.per_class)
    }
}

/// Mean intra-class MMD minus mean inter-class MMD over ordered pairs, with
/// the exact gradient w.r.t. `batch.target`. Surrogates are constants.
pub fn cdd_loss<T: Scalar>(batch: &CddBatch<T>, spec: &KernelSpec<T>) -> Result<(T, DenseMatrix<T>)> {
    let c = batch.classes.len();
    if c < 2 {
        return Err(Error::TooFewClasses(c));
    }
    let n = batch.per_class;
    let m = batch.target.cols();
    let nn = T::count(n * n);
    let two = T::lit(2.0);
    let intra_w = T::one() / T::count(c);
    let inter_w = -T::one() / T::count(c * (c - 1));

    // Per-class surrogate self term and target self term with its gradient.
    let mut ss = Vec::with_capacity(c);
    let mut tt = Vec::with_capacity(c);
    let mut tt_grad = DenseMatrix::<T>::zeros(c * n, m);
    for k in 0..c {
        let s = batch.surrogate_block(k);
        ss.push(mean_kernel(spec, &s, &s));
        let mut total = T::zero();
        for p in 0..n {
            let tp = batch.target.row(k * n + p);
            let mut g = vec![T::zero(); m];
            for q in 0..n {
                let tq = batch.target.row(k * n + q);
                let (v, slope) = spec.value_and_slope(tp, tq);
                total = total + v;
                for d in 0..m {
                    g[d] = g[d] + slope * (tp[d] - tq[d]);
                }
            }
            let row = tt_grad.row_mut(k * n + p);
            for d in 0..m {
                row[d] = two * g[d] / nn;
            }
        }
        tt.push(total / nn);
    }

    let mut loss = T::zero();
    let mut grad = DenseMatrix::<T>::zeros(c * n, m);
    for k1 in 0..c {
        for k2 in 0..c {
            let w = if k1 == k2 { intra_w } else { inter_w };
            // Cross term between surrogates of k1 and targets of k2.
            let mut st = T::zero();
            for p in 0..n {
                let tp = batch.target.row(k2 * n + p);
                let mut g = vec![T::zero(); m];
                for i in 0..n {
                    let si = batch.surrogate.row(k1 * n + i);
                    let (v, slope) = spec.value_and_slope(tp, si);
                    st = st + v;
                    for d in 0..m {
                        g[d] = g[d] + slope * (tp[d] - si[d]);
                    }
                }
                let tg = tt_grad.row(k2 * n + p).to_vec();
                let row = grad.row_mut(k2 * n + p);
                for d in 0..m {
                    row[d] = row[d] + w * (tg[d] - two * g[d] / nn);
                }
            }
            let mmd = ss[k1] + tt[k2] - two * st / nn;
            loss = loss + w * mmd;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    fn single(sigma: f64) -> KernelSpec<f64> {
        KernelSpec::new(vec![sigma]).unwrap()
    }

    #[test]
    fn kernel_cases() {
        let spec = KernelSpec::scaled(1.3, &DEFAULT_BANDWIDTH_SCALES).unwrap();
        let x = [0.2, -1.0, 3.0];
        assert_eq!(kernel_eval(&spec, &x, &x), 1.0);
        // ‖a − b‖² = 2σ² with σ = 1.5
        let s = 1.5;
        let a = [s, 0.0];
        let b = [0.0, s];
        assert!((kernel_eval(&single(s), &a, &b) - (-1f64).exp()).abs() < 1e-15);
        let c = [0.7, 0.1, -2.0];
        assert_eq!(kernel_eval(&spec, &x, &c), kernel_eval(&spec, &c, &x));
        assert!(KernelSpec::<f64>::new(vec![]).is_err());
        assert!(KernelSpec::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn median_bandwidth_cases() {
        let two = DenseMatrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(median_bandwidth(&two), 2.0);
        let same = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(median_bandwidth(&same), 1e-6);

        let mut rng = SeededRng::new(7);
        let x: DenseMatrix<f64> = DenseMatrix::from_vec(50, 4, rng.standard_normal(200)).unwrap();
        let mut all = Vec::new();
        for i in 0..50 {
            for j in 0..50 {
                if i < j {
                    let d: f64 = (0..4).map(|d| (x[(i, d)] - x[(j, d)]).powi(2)).sum::<f64>();
                    all.push(d.sqrt());
                }
            }
        }
        all.sort_by(f64::total_cmp);
        let h = all.len() / 2;
        let oracle = if all.len() % 2 == 1 { all[h] } else { (all[h - 1] + all[h]) / 2.0 };
        assert_eq!(median_bandwidth(&x), oracle);
    }

    #[test]
    fn mmd_closed_forms() {
        let mut rng = SeededRng::new(1);
        let x: DenseMatrix<f64> = DenseMatrix::from_vec(4, 3, rng.standard_normal(12)).unwrap();
        let spec = KernelSpec::scaled(1.0, &DEFAULT_BANDWIDTH_SCALES).unwrap();
        assert!(mmd_pair(&x, &x, &spec).unwrap().abs() < 1e-12);
        let s = 0.8;
        let a = DenseMatrix::from_rows(&[[s, 0.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[0.0, s]]).unwrap();
        let v = mmd_pair(&a, &b, &single(s)).unwrap();
        assert!((v - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12);
        assert!((v - 1.264_241_117_657_115_4).abs() < 1e-12);
        assert!(mmd_pair(&a, &x, &spec).is_err());
    }

    #[test]
    fn identical_classes_give_zero_loss() {
        let mut rng = SeededRng::new(2);
        let blk = DenseMatrix::from_vec(3, 2, rng.standard_normal(6)).unwrap();
        let sur = DenseMatrix::from_vec(3, 2, rng.standard_normal(6)).unwrap();
        let stack = |b: &DenseMatrix<f64>| {
            let mut rows: Vec<Vec<f64>> = b.row_iter().map(<[f64]>::to_vec).collect();
            rows.extend(b.row_iter().map(<[f64]>::to_vec));
            DenseMatrix::from_rows(&rows).unwrap()
        };
        let batch = CddBatch::new(vec![0, 1], 3, stack(&blk), stack(&sur)).unwrap();
        let (loss, _) = cdd_loss(&batch, &single(1.0)).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let z = DenseMatrix::<f64>::zeros(2, 2);
        let batch = CddBatch::new(vec![0], 2, z.clone(), z).unwrap();
        assert!(matches!(cdd_loss(&batch, &single(1.0)), Err(Error::TooFewClasses(1))));
    }

    #[test]
    fn permuting_rows_within_a_class_permutes_gradients() {
        let mut rng = SeededRng::new(3);
        let t: DenseMatrix<f64> = DenseMatrix::from_vec(6, 3, rng.standard_normal(18)).unwrap();
        let s = DenseMatrix::from_vec(6, 3, rng.standard_normal(18)).unwrap();
        let spec = KernelSpec::scaled(1.2, &DEFAULT_BANDWIDTH_SCALES).unwrap();
        let (l0, g0) = cdd_loss(&CddBatch::new(vec![4, 1], 3, t.clone(), s.clone()).unwrap(), &spec).unwrap();
        let perm = [2, 0, 1, 4, 5, 3];
        let tp = t.select_rows(&perm).unwrap();
        let (l1, g1) = cdd_loss(&CddBatch::new(vec![4, 1], 3, tp, s).unwrap(), &spec).unwrap();
        assert!((l0 - l1).abs() < 1e-14);
        assert!(g1.max_abs_diff(&g0.select_rows(&perm).unwrap()) < 1e-14);
    }
}
