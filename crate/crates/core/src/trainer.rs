//! The adaptation loop: per-epoch pseudo-labelling and surrogate estimation,
//! then CDD-driven updates of the feature extractor.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::pseudo_label_metrics;
use crate::cdd::{cdd_loss, median_bandwidth, CddBatch, KernelSpec, DEFAULT_BANDWIDTH_SCALES};
use crate::error::{Error, Result};
use crate::model::{classify, LrSchedule, ModelParams, OptConfig, OptState, sgd_step};
use crate::numcore::SeededRng;
use crate::pseudolabel::{
    cosine_distance, filter_confident, max_prob_labels, spherical_kmeans, ConfidentSet,
    KMeansOptions,
};
use crate::sde::{build_surrogates, estimate_covariance, sample_surrogate, MeanEstimator, SdeOptions, SurrogateSet};
use crate::store::{FeatureDataset, Unlabeled};
use crate::Matrix;

/// When surrogates are (re)estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateSchedule {
    #[default]
    EveryEpoch,
    /// Built at the first epoch and reused afterwards.
    Once,
}

/// Source of the confident pseudo-labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PseudoLabeler {
    /// Spherical k-means seeded at the anchors, filtered by cosine distance.
    #[default]
    Clustering,
    /// Classifier softmax, filtered by top probability.
    MaxProb { tau_prime: f64 },
}

/// Mean-estimator ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    TargetMean,
    Anchor,
    UpdateOnce,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::TargetMean, Variant::Anchor, Variant::UpdateOnce];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TargetMean => "target-mean",
            Variant::Anchor => "anchor",
            Variant::UpdateOnce => "update-once",
            Variant::Full => "full",
        }
    }

    /// `cfg` with the estimator or schedule swapped for this variant.
    pub fn apply(self, cfg: &AdaptConfig) -> AdaptConfig {
        let mut out = cfg.clone();
        match self {
            Variant::TargetMean => out.mean_estimator = MeanEstimator::TargetMean,
            Variant::Anchor => out.mean_estimator = MeanEstimator::Anchor,
            Variant::UpdateOnce => out.surrogate_schedule = SurrogateSchedule::Once,
            Variant::Full => {}
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub preset: String,
    pub tau: f64,
    pub gamma: f64,
    pub classes_per_batch: usize,
    pub per_class_batch: usize,
    pub epochs: usize,
    pub opt: OptConfig,
    pub seed: u64,
    /// Kernel bandwidths as multiples of the per-epoch median distance.
    pub bandwidth_scales: Vec<f64>,
    pub mean_estimator: MeanEstimator,
    pub surrogate_schedule: SurrogateSchedule,
    pub pseudo_labeler: PseudoLabeler,
    pub diagonal_covariance: bool,
    pub kmeans: KMeansOptions,
}

impl AdaptConfig {
    fn with(preset: &str, tau: f64, gamma: f64, cpb: usize, nb: usize, schedule: LrSchedule) -> Self {
        Self {
            preset: preset.to_string(),
            tau,
            gamma,
            classes_per_batch: cpb,
            per_class_batch: nb,
            epochs: 30,
            opt: OptConfig {
                schedule,
                ..OptConfig::default()
            },
            seed: 0,
            bandwidth_scales: DEFAULT_BANDWIDTH_SCALES.to_vec(),
            mean_estimator: MeanEstimator::Calibrated,
            surrogate_schedule: SurrogateSchedule::EveryEpoch,
            pseudo_labeler: PseudoLabeler::Clustering,
            diagonal_covariance: false,
            kmeans: KMeansOptions::default(),
        }
    }

    pub fn office() -> Self {
        Self::with("office", 0.6, 1.0, 12, 3, LrSchedule::default())
    }

    pub fn visda() -> Self {
        let schedule = LrSchedule {
            eta0: 0.001,
            alpha: 0.0005,
            beta: 2.25,
        };
        Self::with("visda", 0.078, 2.0, 6, 10, schedule)
    }

    /// `office`, `visda`, or `custom` (office values as the starting point).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "office" => Ok(Self::office()),
            "visda" => Ok(Self::visda()),
            "custom" => Ok(Self {
                preset: "custom".into(),
                ..Self::office()
            }),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if self.classes_per_batch < 2 || self.classes_per_batch > num_classes {
            return bad(format!(
                "classes per batch must lie in [2, {num_classes}], got {}",
                self.classes_per_batch
            ));
        }
        if self.per_class_batch == 0 {
            return bad("per-class batch must be >= 1".into());
        }
        if self.bandwidth_scales.is_empty() || self.bandwidth_scales.iter().any(|&s| !(s > 0.0)) {
            return bad("bandwidth scales must be positive and non-empty".into());
        }
        if let PseudoLabeler::MaxProb { tau_prime } = self.pseudo_labeler {
            if !(tau_prime > 0.0 && tau_prime < 1.0) {
                return bad(format!("tau' must lie in (0, 1), got {tau_prime}"));
            }
        }
        Ok(())
    }

    fn sde_options(&self) -> SdeOptions {
        SdeOptions {
            gamma: self.gamma,
            mean: self.mean_estimator,
            diagonal: self.diagonal_covariance,
        }
    }
}

/// Ground truth that may accompany a run for diagnostics. Never used to
/// compute a gradient or choose a sample.
#[derive(Debug, Clone, Default)]
pub struct EvalProbe {
    pub target_labels: Option<Vec<usize>>,
    /// Labelled source data, for the covariance-bias diagnostic.
    pub source: Option<FeatureDataset>,
}

impl EvalProbe {
    pub fn from_target(target: &FeatureDataset) -> Self {
        Self {
            target_labels: target.labels().map(<[usize]>::to_vec),
            source: None,
        }
    }

    pub fn with_source(mut self, source: FeatureDataset) -> Self {
        self.source = Some(source);
        self
    }
}

/// Diagnostics for one epoch. Quantities measured on the pseudo-labels refer
/// to the epoch start; `accuracy` is measured after the epoch's updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub n_confident: usize,
    pub precision: Option<f64>,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub iterations: usize,
    pub kmeans_iterations: usize,
    pub sigma0: f64,
    /// Whether surrogates were rebuilt this epoch.
    pub sde_rebuilt: bool,
    pub sde_rebuilds: usize,
    /// Cosine distance between each class's confident target mean and its anchor.
    pub anchor_distance: Vec<Option<f64>>,
    pub mean_anchor_distance: f64,
    /// Frobenius distance between target and source class covariances.
    pub covariance_bias: Option<Vec<Option<f64>>>,
}

/// Mutable adaptation state: model, optimizer, RNG and cached surrogates.
pub struct Adapter {
    pub model: ModelParams,
    pub cfg: AdaptConfig,
    opt: OptState,
    rng: SeededRng,
    surrogates: Option<SurrogateSet<f64>>,
    epoch: usize,
    rebuilds: usize,
}

impl Adapter {
    /// Freezes the classifier and validates `cfg` against the model.
    pub fn new(mut model: ModelParams, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate(model.num_classes())?;
        model.freeze_classifier();
        let opt = OptState::new(&model, cfg.opt);
        let rng = SeededRng::new(cfg.seed);
        Ok(Self {
            model,
            cfg,
            opt,
            rng,
            surrogates: None,
            epoch: 0,
            rebuilds: 0,
        })
    }

    pub fn into_model(self) -> ModelParams {
        self.model
    }

    pub fn surrogates(&self) -> Option<&SurrogateSet<f64>> {
        self.surrogates.as_ref()
    }

    fn pseudo_label(&self, features: &Matrix, x: &Matrix) -> Result<(ConfidentSet<f64>, usize)> {
        match self.cfg.pseudo_labeler {
            PseudoLabeler::Clustering => {
                let state = spherical_kmeans(features, &self.model.anchors(), &self.cfg.kmeans)?;
                Ok((filter_confident(features, &state, self.cfg.tau)?, state.iterations))
            }
            PseudoLabeler::MaxProb { tau_prime } => Ok((max_prob_labels(&self.model, x, tau_prime)?, 0)),
        }
    }

    /// One epoch. On error the model and optimizer are left as they were.
    pub fn epoch(&mut self, target: &Unlabeled, probe: Option<&EvalProbe>) -> Result<EpochRecord> {
        if target.num_classes() != self.model.num_classes() {
            return Err(Error::shape(
                format!("{} classes", self.model.num_classes()),
                format!("{}", target.num_classes()),
            ));
        }
        let x = target.features();
        let features = self.model.extract(x)?;
        let (confident, kmeans_iterations) = self.pseudo_label(&features, x)?;
        if confident.is_empty() {
            return Err(Error::NoConfidentSamples);
        }

        let rebuild = self.surrogates.is_none()
            || self.cfg.surrogate_schedule == SurrogateSchedule::EveryEpoch;
        let fresh = if rebuild {
            Some(build_surrogates(&confident, &features, &self.model.anchors(), &self.cfg.sde_options())?)
        } else {
            None
        };
        let surrogates = fresh
            .as_ref()
            .or(self.surrogates.as_ref())
            .expect("surrogates built or cached");
        // Classes usable this epoch need both confident targets and a surrogate.
        let members: Vec<Vec<usize>> = (0..confident.num_classes)
            .map(|k| {
                if surrogates.classes[k].is_some() {
                    confident.members(k)
                } else {
                    Vec::new()
                }
            })
            .collect();
        let populated: Vec<usize> = (0..members.len()).filter(|&k| !members[k].is_empty()).collect();
        if populated.len() < 2 {
            return Err(Error::TooFewClasses(populated.len()));
        }

        let confident_rows: Vec<usize> = populated.iter().flat_map(|&k| members[k].iter().copied()).collect();
        let sigma0 = median_bandwidth(&features.select_rows(&confident_rows)?);
        let kernel = KernelSpec::scaled(sigma0, &self.cfg.bandwidth_scales)?;
        let c = self.cfg.classes_per_batch.min(populated.len());
        let nb = self.cfg.per_class_batch;
        let iterations = confident_rows.len().div_ceil(c * nb);

        let mut model = self.model.clone();
        let mut opt = self.opt.clone();
        let mut rng = self.rng.clone();
        let mut loss_sum = 0.0;
        for _ in 0..iterations {
            let (classes, rows) = sample_batch(&mut rng, &populated, &members, c, nb);
            let mut surrogate = Matrix::zeros(c * nb, model.feature_dim());
            for (slot, &k) in classes.iter().enumerate() {
                let draws = sample_surrogate(surrogates, k, nb, &mut rng)?;
                for i in 0..nb {
                    surrogate.row_mut(slot * nb + i).copy_from_slice(draws.row(i));
                }
            }
            let fwd = model.forward(&x.select_rows(&rows)?)?;
            let batch = CddBatch::new(classes, nb, fwd.features, surrogate)?;
            let (loss, d_features) = cdd_loss(&batch, &kernel)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("cdd loss"));
            }
            let grads = model.backward_features(&fwd.cache, &d_features)?;
            sgd_step(&mut model, &grads, &mut opt)?;
            loss_sum += loss;
        }

        let anchors = self.model.anchors();
        let anchor_distance: Vec<Option<f64>> = (0..confident.num_classes)
            .map(|k| {
                let m = confident.members(k);
                if m.is_empty() {
                    return Ok(None);
                }
                let mean = features.select_rows(&m)?.column_means();
                match cosine_distance(&mean, anchors.row(k)) {
                    Ok(d) => Ok(Some(d)),
                    Err(Error::ZeroVector) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let present: Vec<f64> = anchor_distance.iter().flatten().copied().collect();
        let mean_anchor_distance = present.iter().sum::<f64>() / present.len().max(1) as f64;

        let mut precision = None;
        let mut accuracy = None;
        let mut covariance_bias = None;
        if let Some(p) = probe {
            if let Some(labels) = &p.target_labels {
                precision = Some(pseudo_label_metrics(&confident, labels).0);
                let after = model.extract(x)?;
                let hits = after
                    .row_iter()
                    .zip(labels)
                    .filter(|(f, &y)| classify(f, &model.classifier) == y)
                    .count();
                accuracy = Some(hits as f64 / labels.len() as f64);
            }
            if let Some(src) = &p.source {
                covariance_bias = Some(covariance_bias_per_class(&self.model, src, &features, &confident)?);
            }
        }

        self.model = model;
        self.opt = opt;
        self.rng = rng;
        if let Some(set) = fresh {
            self.rebuilds += 1;
            self.surrogates = Some(set);
        }
        let record = EpochRecord {
            epoch: self.epoch,
            n_confident: confident.len(),
            precision,
            loss: loss_sum / iterations as f64,
            accuracy,
            iterations,
            kmeans_iterations,
            sigma0,
            sde_rebuilt: rebuild,
            sde_rebuilds: self.rebuilds,
            anchor_distance,
            mean_anchor_distance,
            covariance_bias,
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// Draws `c` distinct classes from `populated` and `nb` confident rows for
/// each, with replacement only when a class has fewer than `nb` members.
/// Rows come back class-block by class-block in the order of the classes.
pub fn sample_batch(
    rng: &mut SeededRng,
    populated: &[usize],
    members: &[Vec<usize>],
    c: usize,
    nb: usize,
) -> (Vec<usize>, Vec<usize>) {
    let classes: Vec<usize> = rng
        .choose_distinct(populated.len(), c)
        .into_iter()
        .map(|i| populated[i])
        .collect();
    let mut rows = Vec::with_capacity(c * nb);
    for &k in &classes {
        let pool = &members[k];
        if pool.len() >= nb {
            rows.extend(rng.choose_distinct(pool.len(), nb).into_iter().map(|i| pool[i]));
        } else {
            rows.extend((0..nb).map(|_| pool[rng.below(pool.len())]));
        }
    }
    (classes, rows)
}

fn covariance_bias_per_class(
    model: &ModelParams,
    source: &FeatureDataset,
    target_features: &Matrix,
    confident: &ConfidentSet<f64>,
) -> Result<Vec<Option<f64>>> {
    let src_features = model.extract(source.features())?;
    let labels = source.require_labels()?;
    (0..confident.num_classes)
        .map(|k| {
            let tm = confident.members(k);
            let sm: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
            if tm.is_empty() || sm.is_empty() {
                return Ok(None);
            }
            let t = target_features.select_rows(&tm)?;
            let s = src_features.select_rows(&sm)?;
            let mut ct = estimate_covariance(&t, &t.column_means(), 1.0)?;
            let cs = estimate_covariance(&s, &s.column_means(), 1.0)?;
            ct.axpy(-1.0, &cs)?;
            Ok(Some(ct.frobenius_norm()))
        })
        .collect()
}

/// One adaptation epoch on a fresh [`Adapter`] state.
pub fn adapt_epoch(
    model: &mut ModelParams,
    target: &Unlabeled,
    cfg: &AdaptConfig,
    probe: Option<&EvalProbe>,
) -> Result<EpochRecord> {
    let mut adapter = Adapter::new(model.clone(), cfg.clone())?;
    let record = adapter.epoch(target, probe)?;
    *model = adapter.into_model();
    Ok(record)
}

/// `cfg.epochs` sequential epochs. `model` is replaced by the adapted model
/// only when every epoch succeeds.
pub fn run_adaptation(
    model: &mut ModelParams,
    target: &Unlabeled,
    cfg: &AdaptConfig,
    probe: Option<&EvalProbe>,
) -> Result<Vec<EpochRecord>> {
    let mut adapter = Adapter::new(model.clone(), cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let record = adapter.epoch(target, probe)?;
        log::info!(
            "epoch {epoch}: n'={} loss={:.5} anchor-dist={:.5}{}",
            record.n_confident,
            record.loss,
            record.mean_anchor_distance,
            record.accuracy.map(|a| format!(" acc={a:.4}")).unwrap_or_default()
        );
        history.push(record);
    }
    if cfg.epochs > 0 {
        *model = adapter.into_model();
    }
    Ok(history)
}

pub fn ablation_mean_variant(
    model: &mut ModelParams,
    target: &Unlabeled,
    cfg: &AdaptConfig,
    variant: Variant,
    probe: Option<&EvalProbe>,
) -> Result<Vec<EpochRecord>> {
    run_adaptation(model, target, &variant.apply(cfg), probe)
}

/// First line of a JSONL history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryHeader {
    pub config: AdaptConfig,
    /// Settings given explicitly on top of the preset.
    pub overrides: Vec<String>,
}

/// Writes a header line followed by one record per line.
pub fn write_history_jsonl(
    path: impl AsRef<Path>,
    header: &HistoryHeader,
    history: &[EpochRecord],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &serde_json::json!({ "header": header }))?;
    out.push(b'\n');
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`write_history_jsonl`].
pub fn read_history_jsonl(path: impl AsRef<Path>) -> Result<(HistoryHeader, Vec<EpochRecord>)> {
    #[derive(Deserialize)]
    struct Wrapped {
        header: HistoryHeader,
    }
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Wrapped = serde_json::from_str(lines.next().unwrap_or(""))?;
    let records = lines
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    Ok((header.header, records))
}

pub const HISTORY_CSV_HEADER: &str = "epoch,loss,accuracy,n_confident,mean_anchor_distance";

/// CSV with columns [`HISTORY_CSV_HEADER`]; a missing accuracy is left empty.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(out, "{HISTORY_CSV_HEADER}").map_err(io)?;
    for r in history {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.loss, acc, r.n_confident, r.mean_anchor_distance
        )
        .map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}
