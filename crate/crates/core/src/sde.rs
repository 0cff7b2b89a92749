//! Source distribution estimation.
//!
//! For every class with confident target samples, a Gaussian surrogate of the
//! unseen source feature distribution is built: the mean points along the
//! class anchor with the norm of the target class mean, and the covariance is
//! the target class covariance scaled by `γ`.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numcore::{cholesky, l2_norm, DenseMatrix, Scalar, SeededRng};
use crate::pseudolabel::ConfidentSet;

/// Which estimator supplies the surrogate mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MeanEstimator {
    /// `‖f̄‖ · w / ‖w‖`.
    #[default]
    Calibrated,
    /// The target class mean itself.
    TargetMean,
    /// The raw anchor.
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeOptions {
    pub gamma: f64,
    pub mean: MeanEstimator,
    /// Keep only the covariance diagonal.
    pub diagonal: bool,
}

impl Default for SdeOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            mean: MeanEstimator::Calibrated,
            diagonal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats<T> {
    pub class: usize,
    pub count: usize,
    pub mean: Vec<T>,
    /// Population covariance (divisor `count`).
    pub scatter: DenseMatrix<T>,
}

impl<T: Scalar> ClassStats<T> {
    pub fn from_rows(class: usize, rows: &DenseMatrix<T>) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::EmptyClass);
        }
        let mean = rows.column_means();
        let scatter = estimate_covariance(rows, &mean, T::one())?;
        Ok(Self {
            class,
            count: rows.rows(),
            mean,
            scatter,
        })
    }
}

/// Anchor direction with the norm of the target class mean.
///
/// A zero target mean has no norm to transfer; the result is the zero vector
/// and a warning is logged.
pub fn estimate_mean<T: Scalar>(target_mean: &[T], anchor: &[T]) -> Result<Vec<T>> {
    if target_mean.len() != anchor.len() {
        return Err(Error::shape(
            format!("dim {}", anchor.len()),
            format!("{}", target_mean.len()),
        ));
    }
    let wn = l2_norm(anchor);
    if wn == T::zero() {
        return Err(Error::ZeroAnchor);
    }
    let fn_ = l2_norm(target_mean);
    if fn_ == T::zero() {
        log::warn!("target class mean is zero; surrogate mean set to zero");
        return Ok(vec![T::zero(); anchor.len()]);
    }
    let s = fn_ / wn;
    Ok(anchor.iter().map(|&w| w * s).collect())
}

/// `γ · (1/N) Σ (f − f̄)(f − f̄)ᵀ` over the rows of `class_rows`.
pub fn estimate_covariance<T: Scalar>(
    class_rows: &DenseMatrix<T>,
    mean: &[T],
    gamma: T,
) -> Result<DenseMatrix<T>> {
    let n = class_rows.rows();
    let m = class_rows.cols();
    if n == 0 {
        return Err(Error::EmptyClass);
    }
    if mean.len() != m {
        return Err(Error::shape(format!("mean of dim {m}"), format!("{}", mean.len())));
    }
    let mut centered = class_rows.clone();
    for i in 0..n {
        for (v, &mu) in centered.row_mut(i).iter_mut().zip(mean) {
            *v = *v - mu;
        }
    }
    let mut cov = centered.t_matmul(&centered)?;
    // Exact symmetry regardless of accumulation order.
    for i in 0..m {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov.scale(gamma / T::count(n));
    Ok(cov)
}

/// Diagonal jitter `max(1e-6, 1e-4 · tr(Σ) / m)`.
pub fn regularization<T: Scalar>(cov: &DenseMatrix<T>) -> T {
    let m = T::count(cov.rows().max(1));
    (T::lit(1e-4) * cov.trace() / m).max(T::lit(1e-6))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate<T> {
    pub class: usize,
    pub count: usize,
    pub target_mean: Vec<T>,
    pub mean: Vec<T>,
    /// `γ · Σ_t`, unregularized.
    pub covariance: DenseMatrix<T>,
    /// Lower factor of `covariance + ε I`.
    pub chol: DenseMatrix<T>,
    pub epsilon: T,
}

impl<T: Scalar> Surrogate<T> {
    /// `μ + L z`.
    pub fn transform(&self, z: &[T]) -> Vec<T> {
        let m = self.mean.len();
        let mut out = self.mean.clone();
        for i in 0..m {
            let row = self.chol.row(i);
            let mut s = T::zero();
            for j in 0..=i {
                s = s + row[j] * z[j];
            }
            out[i] = out[i] + s;
        }
        out
    }

    /// `covariance + ε I`, the distribution actually sampled.
    pub fn sampled_covariance(&self) -> DenseMatrix<T> {
        let mut c = self.covariance.clone();
        c.add_diagonal(self.epsilon);
        c
    }
}

/// One surrogate per class; `None` for classes without confident samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSet<T> {
    pub classes: Vec<Option<Surrogate<T>>>,
    pub gamma: T,
}

impl<T: Scalar> SurrogateSet<T> {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, k: usize) -> Result<&Surrogate<T>> {
        self.classes
            .get(k)
            .and_then(Option::as_ref)
            .ok_or(Error::AbsentClass(k))
    }

    pub fn populated(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(k, _)| k)
            .collect()
    }

    /// Means, covariance traces and jitter values as JSON, for diagnostics.
    pub fn debug_json(&self) -> serde_json::Value {
        let classes: Vec<_> = self
            .classes
            .iter()
            .enumerate()
            .map(|(k, s)| match s {
                None => json!({ "class": k, "present": false }),
                Some(s) => json!({
                    "class": k,
                    "present": true,
                    "count": s.count,
                    "mean": s.mean.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                    "mean_norm": l2_norm(&s.mean).as_f64(),
                    "target_mean_norm": l2_norm(&s.target_mean).as_f64(),
                    "covariance_trace": s.covariance.trace().as_f64(),
                    "epsilon": s.epsilon.as_f64(),
                }),
            })
            .collect();
        json!({ "gamma": self.gamma.as_f64(), "classes": classes })
    }
}

/// Builds the class-conditioned surrogates from a confident set.
///
/// `anchors` is `K × m`. Fails with `TooFewClasses` unless at least two classes
/// have confident samples.
pub fn build_surrogates<T: Scalar>(
    confident: &ConfidentSet<T>,
    target_features: &DenseMatrix<T>,
    anchors: &DenseMatrix<T>,
    opts: &SdeOptions,
) -> Result<SurrogateSet<T>> {
    let k = anchors.rows();
    let m = anchors.cols();
    if target_features.cols() != m {
        return Err(Error::shape(
            format!("features of dim {m}"),
            format!("{}", target_features.cols()),
        ));
    }
    if !(opts.gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", opts.gamma)));
    }
    let gamma = T::lit(opts.gamma);
    let populated = confident.class_counts().iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(Error::TooFewClasses(populated));
    }
    let mut classes = Vec::with_capacity(k);
    for c in 0..k {
        let members = confident.members(c);
        if members.is_empty() {
            classes.push(None);
            continue;
        }
        let rows = target_features.select_rows(&members)?;
        let target_mean = rows.column_means();
        let anchor = anchors.row(c);
        let mean = match opts.mean {
            MeanEstimator::Calibrated => {
                estimate_mean(&target_mean, anchor)?
            }
            MeanEstimator::TargetMean => target_mean.clone(),
            MeanEstimator::Anchor => anchor.to_vec(),
        };
        let mut covariance = estimate_covariance(&rows, &target_mean, gamma)?;
        if opts.diagonal {
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        covariance[(i, j)] = T::zero();
                    }
                }
            }
        }
        let (chol, epsilon) = regularized_cholesky(&covariance)?;
        classes.push(Some(Surrogate {
            class: c,
            count: members.len(),
            target_mean,
            mean,
            covariance,
            chol,
            epsilon,
        }));
    }
    Ok(SurrogateSet { classes, gamma })
}

/// Cholesky of `cov + ε I`, growing `ε` tenfold until the factorization succeeds.
fn regularized_cholesky<T: Scalar>(cov: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, T)> {
    let mut eps = regularization(cov);
    let mut last_err = None;
    for _ in 0..8 {
        let mut a = cov.clone();
        a.add_diagonal(eps);
        match cholesky(&a) {
            Ok(l) => return Ok((l, eps)),
            Err(e) => {
                last_err = Some(e);
                eps = eps * T::lit(10.0);
            }
        }
    }
    Err(last_err.unwrap())
}

/// `n` draws `μ_k + L_k z` with `z ~ N(0, I)`.
pub fn sample_surrogate<T: Scalar>(
    set: &SurrogateSet<T>,
    k: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<DenseMatrix<T>> {
    let s = set.get(k)?;
    let m = s.mean.len();
    let mut out = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let z: Vec<T> = rng.standard_normal(m);
        out.row_mut(i).copy_from_slice(&s.transform(&z));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::cosine_distance;

    fn confident(labels: Vec<usize>, k: usize) -> ConfidentSet<f64> {
        ConfidentSet {
            indices: (0..labels.len()).collect(),
            confidences: vec![0.0; labels.len()],
            labels,
            threshold: 0.6,
            num_classes: k,
        }
    }

    #[test]
    fn mean_estimator_cases() {
        assert_eq!(estimate_mean(&[0.0, 2.0], &[3.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        let v = estimate_mean(&[2.0, 0.0], &[1.0, 1.0]).unwrap();
        let r = 2f64.sqrt();
        assert!((v[0] - r).abs() < 1e-15 && (v[1] - r).abs() < 1e-15);
        let v: Vec<f64> = estimate_mean(&[2.0, 4.0], &[0.5, 1.0]).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15 && (v[1] - 4.0).abs() < 1e-15);
        assert!(matches!(estimate_mean(&[1.0, 0.0], &[0.0, 0.0]), Err(Error::ZeroAnchor)));
        assert_eq!(estimate_mean(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn covariance_cases() {
        let x = DenseMatrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let c = estimate_covariance(&x, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        let single = DenseMatrix::from_rows(&[[3.0, -2.0, 1.0]]).unwrap();
        let mean = single.column_means();
        assert!(estimate_covariance(&single, &mean, 1.0)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        let mut rng = SeededRng::new(1);
        let r = DenseMatrix::from_vec(7, 4, rng.standard_normal(28)).unwrap();
        let mean = r.column_means();
        let c1 = estimate_covariance(&r, &mean, 1.0).unwrap();
        let c2 = estimate_covariance(&r, &mean, 2.0).unwrap();
        assert!(c2.max_abs_diff(&c1.scaled(2.0)) < 1e-12);
        assert!(matches!(
            estimate_covariance(&DenseMatrix::<f64>::zeros(0, 2), &[0.0, 0.0], 1.0),
            Err(Error::EmptyClass)
        ));
    }

    #[test]
    fn degenerate_clusters_at_anchors() {
        let anchors = DenseMatrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let feats = DenseMatrix::from_rows(&[[2.0, 0.0], [2.0, 0.0], [0.0, 3.0]]).unwrap();
        let set = build_surrogates(&confident(vec![0, 0, 1], 2), &feats, &anchors, &SdeOptions::default())
            .unwrap();
        for k in 0..2 {
            let s = set.get(k).unwrap();
            assert!(s.mean.iter().zip(anchors.row(k)).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!(s.covariance.as_slice().iter().all(|&v| v == 0.0));
            assert_eq!(s.epsilon, 1e-6);
            assert!(s.chol.matmul_t(&s.chol).unwrap().max_abs_diff(&s.sampled_covariance()) < 1e-12);
        }
    }

    #[test]
    fn absent_class_is_marked_and_unsampleable() {
        let anchors = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let feats = DenseMatrix::from_rows(&[[1.0, 0.1], [0.1, 1.0]]).unwrap();
        let set = build_surrogates(&confident(vec![0, 1], 3), &feats, &anchors, &SdeOptions::default())
            .unwrap();
        assert!(set.classes[2].is_none());
        assert_eq!(set.populated(), vec![0, 1]);
        let mut rng = SeededRng::new(0);
        assert!(matches!(sample_surrogate(&set, 2, 3, &mut rng), Err(Error::AbsentClass(2))));
        let one_class = build_surrogates(&confident(vec![0, 0], 3), &feats, &anchors, &SdeOptions::default());
        assert!(matches!(one_class, Err(Error::TooFewClasses(1))));
        let dump = set.debug_json();
        assert_eq!(dump["classes"][2]["present"], false);
        assert_eq!(dump["classes"][0]["count"], 1);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut rng = SeededRng::new(2);
        let anchors = DenseMatrix::from_vec(2, 3, rng.standard_normal(6)).unwrap();
        let feats = DenseMatrix::from_vec(10, 3, rng.standard_normal(30)).unwrap();
        let labels = (0..10).map(|i| i % 2).collect();
        let set = build_surrogates(&confident(labels, 2), &feats, &anchors, &SdeOptions::default()).unwrap();
        let s = set.get(1).unwrap();
        assert_eq!(s.transform(&[0.0; 3]), s.mean);
    }

    #[test]
    fn tiny_covariance_samples_hug_the_mean() {
        let anchors = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let feats = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let set = build_surrogates(&confident(vec![0, 1], 2), &feats, &anchors, &SdeOptions::default())
            .unwrap();
        let draws = sample_surrogate(&set, 0, 100, &mut SeededRng::new(3)).unwrap();
        for row in draws.row_iter() {
            assert!((row[0] - 1.0).abs() < 1e-2 && row[1].abs() < 1e-2);
        }
    }

    #[test]
    fn anchor_direction_and_norm_transfer() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let k = 4;
            let anchors = DenseMatrix::from_vec(k, 6, rng.standard_normal(k * 6)).unwrap();
            let feats = DenseMatrix::from_vec(30, 6, rng.standard_normal(180)).unwrap();
            let labels = (0..30).map(|_| rng.below(k)).collect();
            let set = build_surrogates(&confident(labels, k), &feats, &anchors, &SdeOptions::default())
                .unwrap();
            for s in set.classes.iter().flatten() {
                assert!(cosine_distance(&s.mean, anchors.row(s.class)).unwrap() < 1e-10);
                assert!((l2_norm(&s.mean) - l2_norm(&s.target_mean)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mean_variants_and_diagonal_mode() {
        let anchors = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let feats = DenseMatrix::from_rows(&[[2.0, 1.0], [3.0, 2.0], [0.0, 5.0], [1.0, 4.0]]).unwrap();
        let cs = confident(vec![0, 0, 1, 1], 2);
        let tm = build_surrogates(&cs, &feats, &anchors, &SdeOptions { mean: MeanEstimator::TargetMean, ..Default::default() }).unwrap();
        assert_eq!(tm.get(0).unwrap().mean, vec![2.5, 1.5]);
        let an = build_surrogates(&cs, &feats, &anchors, &SdeOptions { mean: MeanEstimator::Anchor, ..Default::default() }).unwrap();
        assert_eq!(an.get(1).unwrap().mean, vec![0.0, 1.0]);
        let diag = build_surrogates(&cs, &feats, &anchors, &SdeOptions { diagonal: true, ..Default::default() }).unwrap();
        let c = &diag.get(0).unwrap().covariance;
        assert_eq!(c[(0, 1)], 0.0);
        assert_eq!(c[(0, 0)], 0.25);
    }

    #[test]
    fn works_in_f32() {
        let anchors = DenseMatrix::<f32>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let feats = DenseMatrix::<f32>::from_rows(&[[2.0, 1.0], [3.0, 2.0], [0.0, 5.0], [1.0, 4.0]]).unwrap();
        let cs = ConfidentSet {
            indices: vec![0, 1, 2, 3],
            labels: vec![0, 0, 1, 1],
            confidences: vec![0.0f32; 4],
            threshold: 0.6,
            num_classes: 2,
        };
        let set = build_surrogates(&cs, &feats, &anchors, &SdeOptions::default()).unwrap();
        let s = set.get(0).unwrap();
        assert!((l2_norm(&s.mean) - l2_norm(&s.target_mean)).abs() < 1e-6);
    }
}
