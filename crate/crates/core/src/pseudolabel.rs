//! Pseudo-labels for unlabeled target features.
//!
//! Spherical k-means starts from the classifier anchors, alternates
//! minimum-cosine-distance assignment with mean updates, and the confident set
//! keeps every sample closer than `τ` to its cluster center. The max-probability
//! labeller is the softmax-threshold baseline used for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_rows, ModelParams};
use crate::numcore::{dot, l2_norm, DenseMatrix, Scalar};
use crate::Matrix;

/// `½ (1 − aᵀb / (|a||b|))`, clamped to `[0, 1]`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_distance_with_norms(a, na, b, nb))
}

#[inline]
fn cosine_distance_with_norms<T: Scalar>(a: &[T], na: T, b: &[T], nb: T) -> T {
    let half = T::lit(0.5);
    let d = half * (T::one() - dot(a, b) / (na * nb));
    d.max(T::zero()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iterations: usize,
    /// Stop once every center moves less than this (cosine distance).
    pub tolerance: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState<T> {
    /// `K × m`.
    pub centers: DenseMatrix<T>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Mean assigned cosine distance after each assignment pass.
    pub objective: Vec<T>,
}

impl<T: Scalar> ClusterState<T> {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.rows()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Nearest center by cosine distance, smallest index on ties.
fn nearest<T: Scalar>(f: &[T], nf: T, centers: &DenseMatrix<T>, norms: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (k, &nc) in norms.iter().enumerate() {
        if nc == T::zero() {
            continue;
        }
        let d = cosine_distance_with_norms(f, nf, centers.row(k), nc);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn row_norms<T: Scalar>(m: &DenseMatrix<T>) -> Vec<T> {
    m.row_iter().map(l2_norm).collect()
}

/// Spherical k-means initialized at `anchors` (`K × m`).
///
/// Each iteration assigns every feature to its nearest center and then moves
/// each center to the mean of its assigned features projected onto the unit
/// sphere, which is the minimizer of the summed cosine distance; with that
/// update the objective never increases. Centers are not re-normalized. A
/// center whose cluster is empty keeps its previous position. Zero anchors
/// never attract samples.
pub fn spherical_kmeans<T: Scalar>(
    features: &DenseMatrix<T>,
    anchors: &DenseMatrix<T>,
    opts: &KMeansOptions,
) -> Result<ClusterState<T>> {
    let k = anchors.rows();
    let m = features.cols();
    if k < 2 {
        return Err(Error::TooFewClasses(k));
    }
    if anchors.cols() != m {
        return Err(Error::shape(
            format!("anchors of dim {m}"),
            format!("{}", anchors.cols()),
        ));
    }
    let feature_norms = row_norms(features);
    if feature_norms.iter().any(|&n| n == T::zero()) {
        return Err(Error::ZeroVector);
    }
    let mut centers = anchors.clone();
    let mut norms = row_norms(&centers);
    if norms.iter().all(|&n| n == T::zero()) {
        return Err(Error::AllAnchorsZero);
    }

    let n = features.rows();
    let tol = T::lit(opts.tolerance);
    let mut assignments = vec![0; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations.max(1) {
        iterations += 1;
        let mut total = T::zero();
        for (i, f) in features.row_iter().enumerate() {
            let (best, d) = nearest(f, feature_norms[i], &centers, &norms);
            assignments[i] = best;
            total = total + d;
        }
        objective.push(total / T::count(n.max(1)));

        let mut sums = DenseMatrix::<T>::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, f) in features.row_iter().enumerate() {
            let a = assignments[i];
            counts[a] += 1;
            let inv = T::one() / feature_norms[i];
            for (s, &v) in sums.row_mut(a).iter_mut().zip(f) {
                *s = *s + v * inv;
            }
        }
        let mut shift = T::zero();
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let cnt = T::count(counts[c]);
            let new: Vec<T> = sums.row(c).iter().map(|&s| s / cnt).collect();
            let new_norm = l2_norm(&new);
            let moved = if norms[c] == T::zero() || new_norm == T::zero() {
                T::one()
            } else {
                cosine_distance_with_norms(centers.row(c), norms[c], &new, new_norm)
            };
            shift = shift.max(moved);
            centers.row_mut(c).copy_from_slice(&new);
            norms[c] = new_norm;
        }
        if shift < tol {
            converged = true;
            break;
        }
    }
    Ok(ClusterState {
        centers,
        assignments,
        iterations,
        converged,
        objective,
    })
}

/// Confidently pseudo-labelled subset of the target set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentSet<T> {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Lower is more confident.
    pub confidences: Vec<T>,
    pub threshold: T,
    pub num_classes: usize,
}

impl<T: Scalar> ConfidentSet<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Target indices pseudo-labelled `k`.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.indices
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == k)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Keeps samples whose distance to their assigned center is strictly below `tau`.
pub fn filter_confident<T: Scalar>(
    features: &DenseMatrix<T>,
    state: &ClusterState<T>,
    tau: T,
) -> Result<ConfidentSet<T>> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {tau}")));
    }
    if features.rows() != state.assignments.len() {
        return Err(Error::shape(
            format!("{} rows", state.assignments.len()),
            format!("{}", features.rows()),
        ));
    }
    let mut out = ConfidentSet {
        indices: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
        threshold: tau,
        num_classes: state.centers.rows(),
    };
    for (i, f) in features.row_iter().enumerate() {
        let k = state.assignments[i];
        let d = cosine_distance(f, state.centers.row(k))?;
        if d < tau {
            out.indices.push(i);
            out.labels.push(k);
            out.confidences.push(d);
        }
    }
    Ok(out)
}

/// Max-softmax-probability labelling: keep samples whose top class probability
/// exceeds `tau_prime`. Stored confidence is `1 − p_max`.
pub fn max_prob_labels(params: &ModelParams, target: &Matrix, tau_prime: f64) -> Result<ConfidentSet<f64>> {
    if !(tau_prime > 0.0 && tau_prime < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tau' must lie in (0, 1), got {tau_prime}"
        )));
    }
    let probs = softmax_rows(&params.forward(target)?.logits);
    Ok(confident_from_probabilities(&probs, tau_prime))
}

pub(crate) fn confident_from_probabilities(probs: &Matrix, tau_prime: f64) -> ConfidentSet<f64> {
    let mut out = ConfidentSet {
        indices: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
        threshold: 1.0 - tau_prime,
        num_classes: probs.cols(),
    };
    for (i, row) in probs.row_iter().enumerate() {
        let (mut best, mut p) = (0, row[0]);
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > p {
                best = k;
                p = v;
            }
        }
        if p > tau_prime {
            out.indices.push(i);
            out.labels.push(best);
            out.confidences.push(1.0 - p);
        }
    }
    out
}

/// Thresholds swept by the max-probability ablation.
pub const MAX_PROB_GRID: [f64; 6] = [0.975, 0.95, 0.925, 0.9, 0.875, 0.85];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenseLayer;
    use crate::numcore::SeededRng;

    #[test]
    fn cosine_distance_cases() {
        let a = [0.3f64, -1.2, 2.0];
        assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_distance(&a, &neg).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        let b = [1.0, 2.0, 0.5];
        assert_eq!(cosine_distance(&a, &b).unwrap(), cosine_distance(&b, &a).unwrap());
    }

    #[test]
    fn anchors_are_a_fixed_point() {
        let anchors = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
        let state = spherical_kmeans(&anchors, &anchors, &KMeansOptions::default()).unwrap();
        assert_eq!(state.iterations, 1);
        assert!(state.converged);
        assert_eq!(state.assignments, vec![0, 1, 2]);
        for k in 0..3 {
            assert_eq!(cosine_distance(state.centers.row(k), anchors.row(k)).unwrap(), 0.0);
        }
        let unit = DenseMatrix::from_rows(&[[0.6, 0.8], [0.0, -1.0]]).unwrap();
        let unit_state = spherical_kmeans(&unit, &unit, &KMeansOptions::default()).unwrap();
        assert_eq!(unit_state.iterations, 1);
        assert_eq!(unit_state.centers, unit);
        let w = anchors.transpose();
        for i in 0..3 {
            assert_eq!(crate::model::classify(anchors.row(i), &w), state.assignments[i]);
        }
    }

    #[test]
    fn empty_cluster_keeps_previous_center() {
        // Every sample sits near anchors 0 and 1; anchor 2 points away.
        let anchors = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]).unwrap();
        let x = DenseMatrix::from_rows(&[[1.0, 0.1], [0.9, -0.1], [0.1, 1.0], [-0.1, 0.8]]).unwrap();
        let state = spherical_kmeans(&x, &anchors, &KMeansOptions::default()).unwrap();
        assert!(state.centers.is_finite());
        assert_eq!(state.centers.row(2), &[-1.0, -1.0]);
        assert_eq!(state.cluster_sizes(), vec![2, 2, 0]);
    }

    #[test]
    fn zero_inputs_rejected() {
        let anchors = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = DenseMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(
            spherical_kmeans(&x, &anchors, &KMeansOptions::default()),
            Err(Error::ZeroVector)
        ));
        let x = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            spherical_kmeans(&x, &DenseMatrix::zeros(2, 2), &KMeansOptions::default()),
            Err(Error::AllAnchorsZero)
        ));
    }

    #[test]
    fn scale_invariant_assignment() {
        let mut rng = SeededRng::new(4);
        let x: DenseMatrix<f64> = DenseMatrix::from_vec(40, 3, rng.standard_normal(120)).unwrap();
        let anchors = DenseMatrix::from_vec(4, 3, rng.standard_normal(12)).unwrap();
        let base = spherical_kmeans(&x, &anchors, &KMeansOptions::default()).unwrap();
        let mut scaled = x.clone();
        for v in scaled.row_mut(7) {
            *v *= 1024.0;
        }
        let s = spherical_kmeans(&scaled, &anchors, &KMeansOptions::default()).unwrap();
        assert_eq!(s.assignments[7], base.assignments[7]);
        let state_again = spherical_kmeans(&x, &anchors, &KMeansOptions::default()).unwrap();
        assert_eq!(state_again, base);
    }

    #[test]
    fn filter_is_strict_and_monotone_in_tau() {
        let anchors = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let state = ClusterState {
            centers: anchors.clone(),
            assignments: vec![0, 0, 1],
            iterations: 1,
            converged: true,
            objective: vec![0.0],
        };
        let x = DenseMatrix::from_rows(&[[2.0, 0.0], [-1.0, 0.0], [1.0, 1.0]]).unwrap();
        let c = filter_confident(&x, &state, 0.6).unwrap();
        assert_eq!(c.indices, vec![0, 2]);
        assert_eq!(c.confidences[0], 0.0);
        assert!(c.confidences.iter().all(|&d| d < 0.6));
        let tight = filter_confident(&x, &state, 0.1).unwrap();
        assert_eq!(tight.indices, vec![0]);
        let loose = filter_confident(&x, &state, 0.999).unwrap();
        assert!(!loose.indices.contains(&1));
        assert!(filter_confident(&x, &state, 1.0).is_err());
    }

    #[test]
    fn max_prob_baseline() {
        let k = 10;
        let params = ModelParams {
            layers: vec![DenseLayer {
                weights: DenseMatrix::identity(k),
                bias: vec![0.0; k],
            }],
            classifier: DenseMatrix::identity(k),
            classifier_frozen: true,
        };
        let mut peaked = vec![0.0; k];
        peaked[3] = 20.0;
        let x = DenseMatrix::from_rows(&[peaked, vec![1.0; k]]).unwrap();
        let c = max_prob_labels(&params, &x, 0.9).unwrap();
        assert_eq!(c.indices, vec![0]);
        assert_eq!(c.labels, vec![3]);
        assert!(c.confidences[0] < 1e-6);
        assert_eq!(MAX_PROB_GRID.first(), Some(&0.975));
        assert_eq!(MAX_PROB_GRID.last(), Some(&0.85));
    }
}
