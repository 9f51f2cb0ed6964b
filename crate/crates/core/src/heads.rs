//! Downstream heads trained on frozen embeddings: a per-timestamp
//! reconstruction projection for anomaly detection and an MLP classifier.
//!
//! Heads own their parameters. The diffusion model is only borrowed, so
//! head training cannot modify it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::HeadRecord;
use crate::data::Series;
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::layers::{Binder, Linear};
use crate::metrics::{adjust_predictions, anomaly_threshold, flag, precision_recall_f1, Prf};
use crate::model::Model;
use crate::optim::{AdamConfig, AdamW};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const PROJECTION_NAMESPACE: &str = "projection";
pub const CLASSIFIER_NAMESPACE: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl HeadTrainConfig {
    pub fn projection(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-6,
            seed,
        }
    }

    pub fn classifier(seed: u64) -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-6,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

fn stack_rows(parts: &[&Matrix]) -> Matrix {
    let cols = parts.first().map_or(0, |m| m.cols());
    let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(data.len() / cols.max(1), cols, data).expect("equal widths")
}

/// Minibatch Adam over `n` items. Returns the mean batch loss per epoch.
fn fit<F>(params: &mut ParamStore, n: usize, cfg: &HeadTrainConfig, rng: &mut ChaCha8Rng, mut batch_loss: F) -> Result<Vec<f64>>
where
    F: for<'a, 'r> FnMut(&mut Graph<'a>, &mut Binder<'a, 'r>, &[usize]) -> Var,
{
    let mut opt = AdamW::new(
        params,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = {
                let mut g = Graph::new();
                let mut bind = Binder::trainable(params).with_dropout(&mut *rng);
                let l = batch_loss(&mut g, &mut bind, chunk);
                (g.value(l).get(0, 0), g.backward(l, params.len()))
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, loss });
            }
            opt.update(params, &grads, cfg.lr);
            total += loss;
            batches += 1;
        }
        history.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    Ok(history)
}

fn load_exact(target: &mut ParamStore, record: &HeadRecord) -> Result<()> {
    let n = target.load_matching(&record.params)?;
    if n != target.len() || n != record.params.len() {
        return Err(Error::Checkpoint(format!(
            "head {} holds {} tensors, expected {}",
            record.namespace,
            record.params.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Embedding of the observed part of `s` under its own mask.
fn embed_series(model: &Model, s: &Series) -> Result<Embedding> {
    let x_obs = s.values.zip_map(&s.mask, |x, m| x * m);
    model.embed(&x_obs, &s.mask, &s.feature_ids)
}

/// Maps the `K * (C - 1)` non-mask embedding channels of one timestamp
/// back to its `K` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub n_features: usize,
    /// Embedding channels per feature, mask channel excluded.
    pub channels: usize,
    pub params: ParamStore,
    pub linear: Linear,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectionMeta {
    n_features: usize,
    channels: usize,
}

impl ProjectionHead {
    pub fn new(n_features: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(n_features, channels, &mut rng)
    }

    /// Head sized for `model`'s embedding and `n_features` features.
    pub fn for_model(model: &Model, n_features: usize, seed: u64) -> Self {
        Self::new(n_features, model.config.embedding_channels() - 1, seed)
    }

    fn init(n_features: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let linear = Linear::init(&mut params, "proj", n_features * channels, n_features, rng);
        Self {
            n_features,
            channels,
            params,
            linear,
        }
    }

    pub fn input_width(&self) -> usize {
        self.n_features * self.channels
    }

    /// `[L, K * channels]` rows of per-timestamp features. The trailing
    /// mask channel of `emb` is dropped.
    pub fn features(&self, emb: &Embedding) -> Result<Matrix> {
        let (k, l, c) = emb.shape();
        if k != self.n_features || c != self.channels + 1 {
            return Err(Error::Shape(format!(
                "projection head expects [{}, L, {}] embeddings, got [{k}, {l}, {c}]",
                self.n_features,
                self.channels + 1
            )));
        }
        let w = self.channels;
        Ok(Matrix::from_fn(l, k * w, |t, j| emb.get(j / w, t, j % w)))
    }

    /// `[L, K]` reconstruction from [`ProjectionHead::features`].
    pub fn project(&self, features: &Matrix) -> Matrix {
        let w = self.params.get(self.linear.w);
        let b = self.params.get(self.linear.b);
        let mut out = features.matmul(w);
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        out
    }

    /// `[K, L]` reconstruction of a series from its embedding.
    pub fn reconstruct(&self, model: &Model, s: &Series) -> Result<Matrix> {
        let f = self.features(&embed_series(model, s)?)?;
        Ok(self.project(&f).transpose())
    }

    /// Per-timestamp squared reconstruction error averaged over the
    /// observed features; 0 where nothing is observed.
    pub fn scores(&self, model: &Model, s: &Series) -> Result<Vec<f64>> {
        let rec = self.reconstruct(model, s)?;
        let (k, l) = s.values.shape();
        Ok((0..l)
            .map(|t| {
                let (mut sum, mut n) = (0.0, 0usize);
                for f in 0..k {
                    if s.mask.get(f, t) != 0.0 {
                        let d = rec.get(f, t) - s.values.get(f, t);
                        sum += d * d;
                        n += 1;
                    }
                }
                if n == 0 { 0.0 } else { sum / n as f64 }
            })
            .collect())
    }

    /// Concatenated scores over consecutive windows.
    pub fn score_windows(&self, model: &Model, windows: &[Series]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in windows {
            out.extend(self.scores(model, s)?);
        }
        Ok(out)
    }

    /// Mean squared error over observed cells of `data`.
    pub fn reconstruction_mse(&self, model: &Model, data: &[Series]) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in data {
            let rec = self.reconstruct(model, s)?;
            for ((r, x), m) in rec.as_slice().iter().zip(s.values.as_slice()).zip(s.mask.as_slice()) {
                if *m != 0.0 {
                    sum += (r - x) * (r - x);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::UndefinedMetric("no observed cells".into()));
        }
        Ok(sum / n as f64)
    }

    pub fn to_record(&self) -> HeadRecord {
        let meta = ProjectionMeta {
            n_features: self.n_features,
            channels: self.channels,
        };
        HeadRecord {
            namespace: PROJECTION_NAMESPACE.into(),
            meta: serde_json::to_value(meta).expect("plain struct"),
            params: self.params.clone(),
        }
    }

    pub fn from_record(record: &HeadRecord) -> Result<Self> {
        let meta: ProjectionMeta = serde_json::from_value(record.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("projection head metadata: {e}")))?;
        let mut head = Self::new(meta.n_features, meta.channels, 0);
        load_exact(&mut head.params, record)?;
        Ok(head)
    }
}

/// Trains a fresh projection head on the observed cells of `data` with the
/// model frozen. Returns the head and the per-epoch training loss.
pub fn finetune_projection(model: &Model, data: &[Series], cfg: &HeadTrainConfig) -> Result<(ProjectionHead, Vec<f64>)> {
    cfg.validate()?;
    let k = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training series".into()))?
        .values
        .rows();
    if data.iter().any(|s| s.values.rows() != k) {
        return Err(Error::Shape("all series must have the same feature count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ProjectionHead::init(k, model.config.embedding_channels() - 1, &mut rng);
    let mut inputs = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    let mut weights = Vec::with_capacity(data.len());
    for s in data {
        inputs.push(head.features(&embed_series(model, s)?)?);
        targets.push(s.values.transpose());
        weights.push(s.mask.transpose());
    }
    let linear = head.linear;
    let history = fit(&mut head.params, data.len(), cfg, &mut rng, |g, bind, idx| {
        let pick = |v: &[Matrix]| stack_rows(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        let w = pick(&weights);
        let count = w.sum().max(1.0);
        let x = g.constant(pick(&inputs));
        let y = g.constant(pick(&targets));
        let w = g.constant(w);
        let pred = linear.apply(g, bind, x);
        let diff = g.sub(pred, y);
        let diff = g.mul(diff, w);
        let sse = g.sum_squares(diff);
        g.scale(sse, 1.0 / count)
    })?;
    Ok((head, history))
}

/// How the detection threshold is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    Fixed(f64),
    /// Flag this fraction of the validation timestamps.
    ValidationRatio(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub scores: Vec<f64>,
    pub threshold: f64,
    /// Flags before adjustment.
    pub raw: Vec<bool>,
    /// Flags after adjustment when labels are given, otherwise `raw`.
    pub predictions: Vec<bool>,
    pub metrics: Option<Prf>,
}

/// Scores `test` windows, thresholds them and, given labels, applies the
/// run adjustment and reports precision, recall and F1.
pub fn detect(
    model: &Model,
    head: &ProjectionHead,
    test: &[Series],
    rule: ThresholdRule,
    validation: Option<&[Series]>,
    labels: Option<&[bool]>,
) -> Result<Detection> {
    let threshold = match rule {
        ThresholdRule::Fixed(d) => d,
        ThresholdRule::ValidationRatio(r) => {
            let val = validation.ok_or_else(|| {
                Error::InvalidArgument("a validation set is required when no threshold is given".into())
            })?;
            anomaly_threshold(&head.score_windows(model, val)?, r)?
        }
    };
    let scores = head.score_windows(model, test)?;
    let raw = flag(&scores, threshold);
    let (predictions, metrics) = match labels {
        Some(gt) => {
            let adjusted = adjust_predictions(&raw, gt)?;
            let prf = precision_recall_f1(&adjusted, gt)?;
            (adjusted, Some(prf))
        }
        None => (raw.clone(), None),
    };
    Ok(Detection {
        scores,
        threshold,
        raw,
        predictions,
        metrics,
    })
}

/// Shape of the three-layer classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierLayout {
    pub n_features: usize,
    pub len: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl ClassifierLayout {
    pub fn new(n_features: usize, len: usize, channels: usize, n_classes: usize) -> Self {
        Self {
            n_features,
            len,
            channels,
            n_classes,
            hidden: 256,
            dropout: 0.1,
        }
    }

    pub fn input_width(&self) -> usize {
        self.n_features * self.len * self.channels
    }

    fn validate(&self) -> Result<()> {
        if self.input_width() == 0 || self.hidden == 0 || self.n_classes < 2 {
            return Err(Error::Config("classifier needs non-empty input, hidden width and at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Dense, SiLU, dropout, dense, SiLU, dropout, dense over the flattened
/// `[K, L, C]` embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub layout: ClassifierLayout,
    pub params: ParamStore,
    pub layers: [Linear; 3],
}

impl ClassifierHead {
    pub fn new(layout: ClassifierLayout, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(layout, &mut rng)
    }

    fn init(layout: ClassifierLayout, rng: &mut ChaCha8Rng) -> Result<Self> {
        layout.validate()?;
        let mut params = ParamStore::new();
        let h = layout.hidden;
        let layers = [
            Linear::init(&mut params, "mlp1", layout.input_width(), h, rng),
            Linear::init(&mut params, "mlp2", h, h, rng),
            Linear::init(&mut params, "mlp3", h, layout.n_classes, rng),
        ];
        Ok(Self { layout, params, layers })
    }

    fn forward<'a>(&self, g: &mut Graph<'a>, bind: &mut Binder<'a, '_>, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers[..2] {
            h = layer.apply(g, bind, h);
            h = g.silu(h);
            h = bind.dropout(g, h, self.layout.dropout);
        }
        self.layers[2].apply(g, bind, h)
    }

    /// Class logits for `[B, input_width]` rows. Dropout is off.
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.layout.input_width() {
            return Err(Error::Shape(format!(
                "classifier expects {} input columns, got {}",
                self.layout.input_width(),
                features.cols()
            )));
        }
        let mut g = Graph::new();
        let mut bind = Binder::frozen(&self.params);
        let x = g.constant_ref(features);
        let out = self.forward(&mut g, &mut bind, x);
        Ok(g.value(out).clone())
    }

    /// Row-wise softmax of [`ClassifierHead::logits`].
    pub fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(features)?))
    }

    pub fn to_record(&self) -> HeadRecord {
        HeadRecord {
            namespace: CLASSIFIER_NAMESPACE.into(),
            meta: serde_json::to_value(self.layout).expect("plain struct"),
            params: self.params.clone(),
        }
    }

    pub fn from_record(record: &HeadRecord) -> Result<Self> {
        let layout: ClassifierLayout = serde_json::from_value(record.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("classifier metadata: {e}")))?;
        let mut head = Self::new(layout, 0)?;
        load_exact(&mut head.params, record)?;
        Ok(head)
    }
}

/// Flattened embedding of a completed series, embedded with every cell
/// marked observed: a `[1, K * L * C]` row.
pub fn classifier_features(model: &Model, imputed: &Matrix, feature_ids: &[usize]) -> Result<Matrix> {
    let full = Matrix::filled(imputed.rows(), imputed.cols(), 1.0);
    let emb = model.embed(imputed, &full, feature_ids)?;
    let width = emb.z.len();
    emb.z.reshape(1, width)
}

/// Trains a fresh classifier on `[1, input_width]` feature rows with
/// cross-entropy. Returns the head and the per-epoch training loss.
pub fn finetune_classifier(
    features: &[Matrix],
    labels: &[usize],
    layout: ClassifierLayout,
    cfg: &HeadTrainConfig,
) -> Result<(ClassifierHead, Vec<f64>)> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= layout.n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            layout.n_classes
        )));
    }
    if let Some(f) = features.iter().find(|f| f.shape() != (1, layout.input_width())) {
        return Err(Error::Shape(format!(
            "feature row has shape {:?}, expected (1, {})",
            f.shape(),
            layout.input_width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ClassifierHead::init(layout, &mut rng)?;
    let shell = ClassifierHead {
        layout,
        params: ParamStore::new(),
        layers: head.layers,
    };
    let history = fit(&mut head.params, features.len(), cfg, &mut rng, |g, bind, idx| {
        let x = stack_rows(&idx.iter().map(|&i| &features[i]).collect::<Vec<_>>());
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let x = g.constant(x);
        let logits = shell.forward(g, bind, x);
        g.cross_entropy(logits, &y)
    })?;
    Ok((head, history))
}

/// Fraction of rows whose most probable class matches the label.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = probs.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_uniform_probabilities() {
        let layout = ClassifierLayout {
            hidden: 4,
            ..ClassifierLayout::new(1, 2, 3, 4)
        };
        let mut head = ClassifierHead::new(layout, 3).unwrap();
        for id in head.layers[2].ids() {
            *head.params.get_mut(id) = Matrix::zeros(head.params.get(id).rows(), head.params.get(id).cols());
        }
        let p = head.predict_proba(&Matrix::filled(2, 6, 0.3)).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn projection_features_skip_the_mask_channel() {
        let head = ProjectionHead::new(2, 2, 1);
        let z = Matrix::from_fn(6, 3, |r, c| (r * 10 + c) as f64);
        let emb = Embedding {
            z,
            n_features: 2,
            len: 3,
        };
        let f = head.features(&emb).unwrap();
        assert_eq!(f.shape(), (3, 4));
        assert_eq!(f.row(1), &[10.0, 11.0, 40.0, 41.0]);
    }
}
