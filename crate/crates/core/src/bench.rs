//! Synthetic covariate-shift benchmark, evaluation metrics and the
//! finite-difference gradient suite.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cdd::{cdd_loss, CddBatch, KernelSpec, DEFAULT_BANDWIDTH_SCALES};
use crate::error::{Error, Result};
use crate::model::{classify, ModelParams};
use crate::numcore::{l2_norm, SeededRng};
use crate::pseudolabel::ConfidentSet;
use crate::store::FeatureDataset;
use crate::Matrix;

/// Generative description of a source/target pair of Gaussian-blob domains.
///
/// The target is the source process pushed through a rotation of the first
/// two input coordinates followed by a translation along a seed-derived unit
/// direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Norm of every class center.
    pub center_spread: f64,
    /// Radians, applied in the `(x0, x1)` plane.
    pub rotation: f64,
    /// Length of the translation vector.
    pub translation: f64,
    pub noise: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            center_spread: 1.35,
            rotation: PI / 6.0,
            translation: 1.0,
            noise: 0.35,
            samples_per_class: 300,
            seed: 0,
        }
    }
}

const CENTER_STREAM: u64 = 0;
const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const HOLDOUT_STREAM: u64 = 3;

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be >= 1".into());
        }
        if !(0.0..PI).contains(&self.rotation) {
            return bad(format!("rotation must lie in [0, pi), got {}", self.rotation));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be > 0, got {}", self.noise));
        }
        if !(self.center_spread >= 0.0 && self.center_spread.is_finite()) {
            return bad(format!("center_spread must be >= 0, got {}", self.center_spread));
        }
        if !(self.translation >= 0.0 && self.translation.is_finite()) {
            return bad(format!("translation must be >= 0, got {}", self.translation));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults. `rotation` is in radians, or degrees with a `deg` suffix.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigParse {
                path: origin.to_string(),
                line: no + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let float = || {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("`{key}`: not a number: `{value}`")))
            };
            let int = || {
                value
                    .parse::<u64>()
                    .map_err(|_| err(format!("`{key}`: not a non-negative integer: `{value}`")))
            };
            match key {
                "num_classes" | "classes" => spec.num_classes = int()? as usize,
                "dim" => spec.dim = int()? as usize,
                "center_spread" => spec.center_spread = float()?,
                "rotation" => {
                    spec.rotation = match value.strip_suffix("deg") {
                        Some(d) => {
                            d.trim()
                                .parse::<f64>()
                                .map_err(|_| err(format!("`rotation`: not a number: `{value}`")))?
                                .to_radians()
                        }
                        None => float()?,
                    }
                }
                "translation" => spec.translation = float()?,
                "noise" => spec.noise = float()?,
                "samples_per_class" => spec.samples_per_class = int()? as usize,
                "seed" => spec.seed = int()?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        spec.validate().map_err(|e| Error::ConfigParse {
            path: origin.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Class centers (`K × d`), each of norm `center_spread`.
    pub fn centers(&self) -> Matrix {
        let mut rng = SeededRng::new(self.seed).fork(CENTER_STREAM);
        let mut c = Matrix::zeros(self.num_classes, self.dim);
        for k in 0..self.num_classes {
            let z: Vec<f64> = rng.standard_normal(self.dim);
            let n = l2_norm(&z).max(1e-12);
            for (dst, v) in c.row_mut(k).iter_mut().zip(&z) {
                *dst = self.center_spread * v / n;
            }
        }
        c
    }

    /// Unit translation direction, drawn after the centers on the same stream.
    pub fn translation_vector(&self) -> Vec<f64> {
        let mut rng = SeededRng::new(self.seed).fork(CENTER_STREAM);
        let _: Vec<f64> = rng.standard_normal(self.num_classes * self.dim);
        let z: Vec<f64> = rng.standard_normal(self.dim);
        let n = l2_norm(&z).max(1e-12);
        z.iter().map(|v| self.translation * v / n).collect()
    }

    /// Maps a source-domain input into the target domain.
    pub fn shift(&self, x: &mut [f64], t: &[f64]) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = (x[0], x[1]);
        x[0] = c * a - s * b;
        x[1] = s * a + c * b;
        for (v, d) in x.iter_mut().zip(t) {
            *v += d;
        }
    }

    fn blobs(&self, stream: u64, shifted: bool, tag: &str) -> Result<FeatureDataset> {
        let centers = self.centers();
        let t = self.translation_vector();
        let mut rng = SeededRng::new(self.seed).fork(stream);
        let n = self.num_classes * self.samples_per_class;
        let mut x = Matrix::zeros(n, self.dim);
        let mut labels = Vec::with_capacity(n);
        for k in 0..self.num_classes {
            for i in 0..self.samples_per_class {
                let row = x.row_mut(k * self.samples_per_class + i);
                let z: Vec<f64> = rng.standard_normal(self.dim);
                for ((dst, c), z) in row.iter_mut().zip(centers.row(k)).zip(&z) {
                    *dst = c + self.noise * z;
                }
                if shifted {
                    self.shift(row, &t);
                }
                labels.push(k);
            }
        }
        FeatureDataset::new(x, Some(labels), self.num_classes, tag)
    }

    /// Fresh source-domain draws, independent of the training split.
    pub fn source_holdout(&self) -> Result<FeatureDataset> {
        self.validate()?;
        self.blobs(HOLDOUT_STREAM, false, "source-holdout")
    }
}

/// Labeled source and target datasets for `spec`.
pub fn gen_shift(spec: &ShiftSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    spec.validate()?;
    Ok((
        spec.blobs(SOURCE_STREAM, false, "source")?,
        spec.blobs(TARGET_STREAM, true, "target")?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy restricted to each true class; 0 for classes absent from the data.
    pub per_class: Vec<f64>,
}

impl Evaluation {
    /// Mean of the per-class accuracies.
    pub fn mean_class_accuracy(&self) -> f64 {
        self.per_class.iter().sum::<f64>() / self.per_class.len() as f64
    }
}

pub fn evaluate(model: &ModelParams, ds: &FeatureDataset) -> Result<Evaluation> {
    let labels = ds.require_labels()?;
    let features = model.extract(ds.features())?;
    let k = ds.num_classes();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (f, &y) in features.row_iter().zip(labels) {
        totals[y] += 1;
        if classify(f, &model.classifier) == y {
            hits[y] += 1;
        }
    }
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / ds.len() as f64,
        per_class,
    })
}

/// Precision of the pseudo-labels against ground truth, and `|D'_t|`.
/// An empty confident set reports precision 0.
pub fn pseudo_label_metrics(confident: &ConfidentSet<f64>, true_labels: &[usize]) -> (f64, usize) {
    let n = confident.len();
    if n == 0 {
        return (0.0, 0);
    }
    let correct = confident
        .indices
        .iter()
        .zip(&confident.labels)
        .filter(|(&i, &l)| true_labels.get(i) == Some(&l))
        .count();
    (correct as f64 / n as f64, n)
}

/// Relative error used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckComponent {
    pub name: String,
    pub configurations: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub components: Vec<GradcheckComponent>,
    pub passed: bool,
    pub elapsed_seconds: f64,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.max_relative_error)
            .fold(0.0, f64::max)
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_CONFIGS: usize = 24;
const FD_STEP: f64 = 1e-6;

/// Random CDD-shaped problem: an MLP producing target features for a batch of
/// `classes × per_class` inputs, compared against fixed surrogate rows.
struct Problem {
    model: ModelParams,
    x: Matrix,
    batch: CddBatch<f64>,
    kernel: KernelSpec<f64>,
}

impl Problem {
    fn random(rng: &mut SeededRng) -> Result<Self> {
        let input = 2 + rng.below(5);
        let depth = 1 + rng.below(2);
        let mut dims = vec![input];
        for _ in 0..depth {
            dims.push(2 + rng.below(6));
        }
        let classes = 2 + rng.below(3);
        let per_class = 1 + rng.below(3);
        let model = ModelParams::init(&dims, classes, rng)?;
        let n = classes * per_class;
        let x = Matrix::from_vec(n, input, rng.standard_normal(n * input))?;
        let m = model.feature_dim();
        let target = model.extract(&x)?;
        let surrogate = Matrix::from_vec(n, m, rng.standard_normal(n * m))?;
        let base = 0.5 + 1.5 * rng.uniform();
        let batch = CddBatch::new((0..classes).collect(), per_class, target, surrogate)?;
        let kernel = KernelSpec::scaled(base, &DEFAULT_BANDWIDTH_SCALES)?;
        Ok(Self { model, x, batch, kernel })
    }

    fn loss_at_features(&self, f: &Matrix) -> Result<f64> {
        let mut b = self.batch.clone();
        b.target = f.clone();
        Ok(cdd_loss(&b, &self.kernel)?.0)
    }

    fn loss_at_params(&self, model: &ModelParams) -> Result<f64> {
        self.loss_at_features(&model.extract(&self.x)?)
    }
}

/// Checks one analytic gradient against central differences of `f`.
fn fd_compare(
    analytic: &[f64],
    point: &[f64],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut p = point.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let up = f(&p)?;
        p[i] = orig - FD_STEP;
        let down = f(&p)?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Runs the MLP-backprop and CDD-gradient comparisons over
/// [`GRADCHECK_CONFIGS`] random configurations each.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(seed, 0.0)
}

/// As [`gradcheck_suite`], with `corruption` added to the first coordinate of
/// every analytic gradient (a negative control for the checker itself).
pub fn gradcheck_with(seed: u64, corruption: f64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = SeededRng::new(seed);
    let (mut mlp_worst, mut cdd_worst) = (0.0f64, 0.0f64);
    let (mut mlp_coords, mut cdd_coords) = (0, 0);
    for _ in 0..GRADCHECK_CONFIGS {
        let p = Problem::random(&mut rng)?;

        let (_, d_target) = cdd_loss(&p.batch, &p.kernel)?;
        let mut analytic = d_target.as_slice().to_vec();
        analytic[0] += corruption;
        let (n, m) = p.batch.target.shape();
        cdd_worst = cdd_worst.max(fd_compare(&analytic, p.batch.target.as_slice(), |v| {
            p.loss_at_features(&Matrix::from_vec(n, m, v.to_vec())?)
        })?);
        cdd_coords += analytic.len();

        let fwd = p.model.forward(&p.x)?;
        let grads = p.model.backward_features(&fwd.cache, &d_target)?;
        let mut analytic = grads.flatten_extractor();
        analytic[0] += corruption;
        let mut probe = p.model.clone();
        mlp_worst = mlp_worst.max(fd_compare(&analytic, &p.model.flatten_extractor(), |v| {
            probe.set_extractor(v);
            p.loss_at_params(&probe)
        })?);
        mlp_coords += analytic.len();
    }
    let components = vec![
        GradcheckComponent {
            name: "mlp_backprop".into(),
            configurations: GRADCHECK_CONFIGS,
            coordinates: mlp_coords,
            max_relative_error: mlp_worst,
        },
        GradcheckComponent {
            name: "cdd_target_gradient".into(),
            configurations: GRADCHECK_CONFIGS,
            coordinates: cdd_coords,
            max_relative_error: cdd_worst,
        },
    ];
    let passed = components
        .iter()
        .all(|c| c.max_relative_error < GRADCHECK_TOLERANCE);
    Ok(GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        components,
        passed,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
