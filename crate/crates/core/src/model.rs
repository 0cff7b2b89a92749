//! Feature extractor `F` (tanh MLP with a linear output layer) and the linear
//! classifier `G` whose columns are the class anchors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::SeededRng;
use crate::store::{ByteReader, FeatureDataset};
use crate::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SFDM";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLAG_FROZEN: u32 = 1;

/// Fully connected layer, `out = input · weights + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in_dim × out_dim`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Matrix::from_fn(in_dim, out_dim, |_, _| a * (2.0 * rng.uniform() - 1.0));
        Self {
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Extractor layers; tanh between them, the last one is linear.
    pub layers: Vec<DenseLayer>,
    /// `m × K`; column `k` is the anchor of class `k`.
    pub classifier: Matrix,
    pub classifier_frozen: bool,
}

/// Activations kept by [`ModelParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Matrix,
    pub logits: Matrix,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients shaped like [`ModelParams`]; `classifier` is `None` when the
/// classifier receives no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub classifier: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            classifier: Some(Matrix::zeros(
                params.classifier.rows(),
                params.classifier.cols(),
            )),
        }
    }

    /// Extractor gradients flattened in parameter order (per layer: weights, bias).
    pub fn flatten_extractor(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

impl ModelParams {
    /// Glorot-uniform initialization; `dims = [input, hidden.., feature]`.
    pub fn init(dims: &[usize], num_classes: usize, rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer dims must have >= 2 nonzero entries, got {dims:?}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig("need K >= 2".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::glorot(w[0], w[1], rng))
            .collect();
        let m = *dims.last().unwrap();
        let a = (6.0 / (m + num_classes) as f64).sqrt();
        let classifier = Matrix::from_fn(m, num_classes, |_, _| a * (2.0 * rng.uniform() - 1.0));
        Ok(Self {
            layers,
            classifier,
            classifier_frozen: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.cols()
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    /// Anchors as rows: `K × m`.
    pub fn anchors(&self) -> Matrix {
        self.classifier.transpose()
    }

    pub fn freeze_classifier(&mut self) {
        self.classifier_frozen = true;
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("input dim {}", self.input_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = activations[l].matmul(&layer.weights)?;
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                    if l != last {
                        *v = v.tanh();
                    }
                }
            }
            activations.push(z);
        }
        let features = activations.last().unwrap().clone();
        let logits = features.matmul(&self.classifier)?;
        Ok(Forward {
            features,
            logits,
            cache: ForwardCache { activations },
        })
    }

    /// Features only.
    pub fn extract(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.features)
    }

    /// Predicted classes for a batch of inputs.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let fwd = self.forward(x)?;
        Ok(fwd
            .features
            .row_iter()
            .map(|f| classify(f, &self.classifier))
            .collect())
    }

    /// Gradients of a scalar loss with respect to every extractor parameter,
    /// given its gradient with respect to the extracted features.
    pub fn backward_features(&self, cache: &ForwardCache, d_features: &Matrix) -> Result<Gradients> {
        let layers = self.backprop(cache, d_features.clone())?;
        Ok(Gradients {
            layers,
            classifier: None,
        })
    }

    /// Gradients given `dL/dlogits`; the classifier gets a gradient unless frozen.
    pub fn backward_logits(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<Gradients> {
        let features = cache.activations.last().unwrap();
        let d_features = d_logits.matmul_t(&self.classifier)?;
        let classifier = if self.classifier_frozen {
            None
        } else {
            Some(features.t_matmul(d_logits)?)
        };
        Ok(Gradients {
            layers: self.backprop(cache, d_features)?,
            classifier,
        })
    }

    fn backprop(&self, cache: &ForwardCache, mut upstream: Matrix) -> Result<Vec<LayerGrad>> {
        let n_layers = self.layers.len();
        if cache.activations.len() != n_layers + 1 {
            return Err(Error::shape(
                format!("{} cached activations", n_layers + 1),
                format!("{}", cache.activations.len()),
            ));
        }
        let out = &cache.activations[n_layers];
        if upstream.shape() != out.shape() {
            return Err(Error::shape(
                format!("{:?}", out.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            if l != n_layers - 1 {
                // tanh' = 1 - tanh²
                let act = &cache.activations[l + 1];
                for (g, a) in upstream.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    *g *= 1.0 - a * a;
                }
            }
            let input = &cache.activations[l];
            let weights = input.t_matmul(&upstream)?;
            let mut bias = vec![0.0; upstream.cols()];
            for row in upstream.row_iter() {
                for (b, g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            let next = if l > 0 {
                Some(upstream.matmul_t(&self.layers[l].weights)?)
            } else {
                None
            };
            grads.push(LayerGrad { weights, bias });
            if let Some(next) = next {
                upstream = next;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Extractor parameters flattened in the order of [`Gradients::flatten_extractor`].
    pub fn flatten_extractor(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`ModelParams::flatten_extractor`].
    pub fn set_extractor(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weights.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let flags = if self.classifier_frozen { FLAG_FROZEN } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        let dims = self.dims();
        out.extend_from_slice(&(self.layers.len() as u64).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.num_classes() as u64).to_le_bytes());
        for v in self.flatten_extractor() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.classifier.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let flags = r.u32()?;
        let n_layers = r.u64()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::InvalidConfig(format!("checkpoint has {n_layers} layers")));
        }
        let dims = (0..=n_layers)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let k = r.u64()? as usize;
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            if len.saturating_mul(8) > r.remaining() {
                return Err(Error::TruncatedFile {
                    offset: bytes.len() - r.remaining(),
                    needed: len.saturating_mul(8),
                    available: r.remaining(),
                });
            }
            (0..len).map(|_| r.f64()).collect()
        };
        let mut layers = Vec::with_capacity(n_layers);
        for w in dims.windows(2) {
            let weights = Matrix::from_vec(w[0], w[1], read_vec(w[0] * w[1])?)?;
            let bias = read_vec(w[1])?;
            if bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("checkpoint bias"));
            }
            layers.push(DenseLayer { weights, bias });
        }
        let m = *dims.last().unwrap();
        let classifier = Matrix::from_vec(m, k, read_vec(m * k)?)?;
        Ok(Self {
            layers,
            classifier,
            classifier_frozen: flags & FLAG_FROZEN != 0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `argmax_k fᵀ w_k`, smallest index on ties.
pub fn classify(f: &[f64], classifier: &Matrix) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..classifier.cols() {
        let score: f64 = f
            .iter()
            .enumerate()
            .map(|(j, v)| v * classifier[(j, k)])
            .sum();
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            format!("{} labels", logits.rows()),
            format!("{}", labels.len()),
        ));
    }
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[(i, y)] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// `η = η₀ (1 + α·i)^(−β)`.
pub fn lr_at(step: u64, eta0: f64, alpha: f64, beta: f64) -> f64 {
    eta0 * (1.0 + alpha * step as f64).powf(-beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        lr_at(step, self.eta0, self.alpha, self.beta)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            eta0: 0.001,
            alpha: 0.001,
            beta: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Classifier learning rate as a multiple of the extractor rate.
    pub classifier_lr_scale: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            classifier_lr_scale: 10.0,
        }
    }
}

/// Momentum buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: OptConfig,
    pub step: u64,
    velocity: Gradients,
}

impl OptState {
    pub fn new(params: &ModelParams, config: OptConfig) -> Self {
        Self {
            config,
            step: 0,
            velocity: Gradients::zeros_like(params),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.schedule.at(self.step)
    }
}

fn momentum_update(param: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, cfg: &OptConfig) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= lr * *v;
    }
}

/// One momentum SGD step at the scheduled rate; a frozen classifier is untouched.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, opt: &mut OptState) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::shape(
            format!("{} layer gradients", params.layers.len()),
            format!("{}", grads.layers.len()),
        ));
    }
    let lr = opt.learning_rate();
    let cfg = opt.config;
    for ((layer, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut opt.velocity.layers)
    {
        if layer.weights.shape() != g.weights.shape() || layer.bias.len() != g.bias.len() {
            return Err(Error::shape(
                format!("{:?}", layer.weights.shape()),
                format!("{:?}", g.weights.shape()),
            ));
        }
        momentum_update(
            layer.weights.as_mut_slice(),
            g.weights.as_slice(),
            v.weights.as_mut_slice(),
            lr,
            &cfg,
        );
        momentum_update(&mut layer.bias, &g.bias, &mut v.bias, lr, &cfg);
    }
    if !params.classifier_frozen {
        if let (Some(g), Some(v)) = (&grads.classifier, opt.velocity.classifier.as_mut()) {
            if g.shape() != params.classifier.shape() {
                return Err(Error::shape(
                    format!("{:?}", params.classifier.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            momentum_update(
                params.classifier.as_mut_slice(),
                g.as_slice(),
                v.as_mut_slice(),
                lr * cfg.classifier_lr_scale,
                &cfg,
            );
        }
    }
    opt.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: OptConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            feature_dim: 64,
            epochs: 50,
            batch_size: 64,
            opt: OptConfig {
                schedule: LrSchedule {
                    eta0: 0.01,
                    ..LrSchedule::default()
                },
                ..OptConfig::default()
            },
            seed: 0,
        }
    }
}

/// Supervised cross-entropy training of extractor and classifier on labelled source data.
pub fn pretrain_source(source: &FeatureDataset, cfg: &PretrainConfig) -> Result<ModelParams> {
    let labels = source.require_labels()?;
    if let Some(k) = source.class_counts()?.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateDataset(k));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut dims = vec![source.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.feature_dim);
    let mut params = ModelParams::init(&dims, source.num_classes(), &mut rng)?;
    let mut opt = OptState::new(&params, cfg.opt);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = source.features().select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let fwd = params.forward(&x)?;
            let (loss, d_logits) = cross_entropy(&fwd.logits, &y)?;
            let grads = params.backward_logits(&fwd.cache, &d_logits)?;
            sgd_step(&mut params, &grads, &mut opt)?;
            epoch_loss += loss;
            batches += 1;
        }
        log::debug!("pretrain epoch {epoch}: loss {:.5}", epoch_loss / batches as f64);
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite("pretrain loss"));
        }
    }
    Ok(params)
}
