//! Association scoring: turns a candidate's feature window into a confidence
//! in [0, 1] that source and target are the same cell.
//!
//! Two interchangeable scorers live behind [`ScorerModel`]: an untrained
//! distance baseline, and a small dense network (tanh hidden layers, sigmoid
//! output) trained with class-balanced binary cross-entropy on labelled
//! candidate windows. Training is plain minibatch gradient descent, single
//! threaded and bit-reproducible for a fixed seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    generate_candidates, instance_feature, CandidateAssociation, FeatureVector9, ProjectionMode,
    SpatiotemporalFeature,
};
use crate::model::{GroundTruthLineage, Sequence, Vec3};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("feature width {found} does not match the model's expected width {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptySet,
    #[error("training set must contain both labels")]
    SingleClass,
    #[error("training samples have mixed feature widths ({a} vs {b})")]
    MixedWidths { a: usize, b: usize },
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error("failed to read or write model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is not valid: {0}")]
    Format(String),
    #[error("unsupported model file version {0} (this build reads version {MODEL_FILE_VERSION})")]
    Version(u32),
}

/// One labelled candidate window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub feature: SpatiotemporalFeature,
    /// True when source and target belong to the same cell.
    pub label: bool,
}

pub type TrainingSet = Vec<TrainingSample>;

/// One dense layer; `weights[row]` holds the incoming weights of output
/// unit `row`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeroed(input: usize, output: usize) -> Self {
        Self { weights: vec![vec![0.0; input]; output], bias: vec![0.0; output] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Dense classifier plus the z-score statistics of its training inputs.
/// Hidden layers use tanh; the single output unit is a logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub layers: Vec<Layer>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// Pluggable association scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerModel {
    /// score = 1 / (1 + d / scale) where d is the distance from the
    /// projected source position to the target centroid. With `scale` unset
    /// the scale is the median nearest-neighbour spacing of the batch's
    /// source positions (a per-frame statistic, so it depends on the batch).
    DistanceBaseline { scale: Option<f64>, use_velocity: bool },
    Neural(NeuralModel),
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(flatten)]
    model: ScorerModel,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of a logit, −[y ln ŷ + (1−y) ln(1−ŷ)] with ŷ = sigmoid(z),
/// computed without forming ŷ: softplus(z) − y·z.
fn bce_logit(z: f64, y: f64) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - y * z
}

impl NeuralModel {
    /// All-zero weights and identity normalization; scores 0.5 everywhere.
    pub fn zeroed(input_width: usize, hidden: &[usize]) -> Self {
        let mut dims = vec![input_width];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|d| Layer::zeroed(d[0], d[1])).collect();
        Self { layers, norm_mean: vec![0.0; input_width], norm_std: vec![1.0; input_width] }
    }

    fn random(input_width: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut model = Self::zeroed(input_width, hidden);
        for layer in &mut model.layers {
            let fan_in = layer.weights[0].len() as f64;
            let fan_out = layer.weights.len() as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            for row in &mut layer.weights {
                for w in row {
                    *w = rng.gen_range(-a..a);
                }
            }
        }
        model
    }

    pub fn input_width(&self) -> usize {
        self.norm_mean.len()
    }

    /// Structural coherence check used after deserialization.
    pub fn validate(&self) -> Result<(), String> {
        if self.layers.is_empty() {
            return Err("model has no layers".into());
        }
        let mut width = self.input_width();
        if width == 0 {
            return Err("input width is zero".into());
        }
        if self.norm_std.len() != width {
            return Err("normalization vectors differ in length".into());
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err("normalization stds must be positive".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.is_empty() || layer.weights.len() != layer.bias.len() {
                return Err(format!("layer {i} weight/bias shape mismatch"));
            }
            if layer.weights.iter().any(|row| row.len() != width) {
                return Err(format!("layer {i} expects input width {width}"));
            }
            width = layer.weights.len();
        }
        if width != 1 {
            return Err("output layer must have exactly one unit".into());
        }
        Ok(())
    }

    fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.norm_mean)
            .zip(&self.norm_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    /// Forward pass on z-scored input; returns per-layer activations
    /// (`activations[0]` is the input) and the output logit.
    fn forward(&self, scored: Vec<f64>) -> (Vec<Vec<f64>>, f64) {
        let mut activations = vec![scored];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(activations.last().unwrap());
            if i < last {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            activations.push(z);
        }
        let logit = activations.last().unwrap()[0];
        (activations, logit)
    }

    fn logit_for(&self, feature: &SpatiotemporalFeature) -> Result<f64, ScorerError> {
        if feature.len() != self.input_width() {
            return Err(ScorerError::FeatureWidth {
                expected: self.input_width(),
                found: feature.len(),
            });
        }
        Ok(self.forward(self.normalize(feature.values())).1)
    }

    pub fn score_one(&self, feature: &SpatiotemporalFeature) -> Result<f64, ScorerError> {
        Ok(sigmoid(self.logit_for(feature)?))
    }

    /// Gradients of `weight * bce(logit, y)` for one sample, in layer layout.
    fn backprop(&self, feature: &SpatiotemporalFeature, y: f64, weight: f64) -> Vec<Layer> {
        let (activations, logit) = self.forward(self.normalize(feature.values()));
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeroed(l.weights[0].len(), l.weights.len()))
            .collect();
        // dL/dz at the output, then walk backwards through tanh layers.
        let mut delta = vec![weight * (sigmoid(logit) - y)];
        for i in (0..self.layers.len()).rev() {
            let input = &activations[i];
            for (row, d) in delta.iter().enumerate() {
                for (col, x) in input.iter().enumerate() {
                    grads[i].weights[row][col] = d * x;
                }
                grads[i].bias[row] = *d;
            }
            if i > 0 {
                let mut prev = vec![0.0; input.len()];
                for (row, d) in delta.iter().enumerate() {
                    for (col, p) in prev.iter_mut().enumerate() {
                        *p += self.layers[i].weights[row][col] * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a; // tanh'
                }
                delta = prev;
            }
        }
        grads
    }

    /// Mean class-balanced cross-entropy over `set` (positives weighted by
    /// the negative/positive count ratio, the weight used by training).
    pub fn mean_loss(&self, set: &[TrainingSample]) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let pos_weight = positive_weight(set);
        let total: f64 = set
            .iter()
            .map(|s| {
                let y = if s.label { 1.0 } else { 0.0 };
                let w = if s.label { pos_weight } else { 1.0 };
                w * bce_logit(self.logit_for(&s.feature).expect("widths checked by train"), y)
            })
            .sum();
        total / set.len() as f64
    }

    fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for row in &mut layer.weights {
                out.extend(row.iter_mut());
            }
            out.extend(layer.bias.iter_mut());
        }
        out
    }
}

impl ScorerModel {
    /// Fills in `score` for every candidate. Scores are always in [0, 1].
    pub fn score(&self, candidates: &mut [CandidateAssociation]) -> Result<(), ScorerError> {
        match self {
            ScorerModel::DistanceBaseline { scale, use_velocity } => {
                if let Some(s) = scale {
                    if !(*s > 0.0) {
                        return Err(ScorerError::BadHyper("scale must be positive".into()));
                    }
                }
                let s = match scale {
                    Some(s) => *s,
                    None => median_source_spacing(candidates),
                };
                for c in candidates {
                    let now = block_centroid(c.feature.source_now());
                    let prev = block_centroid(c.feature.source_prev());
                    let projected = if *use_velocity { now + (now - prev) } else { now };
                    let d = (block_centroid(c.feature.target()) - projected).norm();
                    c.score = Some(1.0 / (1.0 + d / s));
                }
            }
            ScorerModel::Neural(net) => {
                for c in candidates {
                    c.score = Some(net.score_one(&c.feature)?);
                }
            }
        }
        Ok(())
    }

    /// Writes a versioned JSON model file. The content is fully serialized
    /// before the file is created, so an invalid model leaves no file behind.
    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        if let ScorerModel::Neural(net) = self {
            net.validate().map_err(ScorerError::Format)?;
        }
        let file = ModelFile { version: MODEL_FILE_VERSION, model: self.clone() };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| ScorerError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| ScorerError::Format(e.to_string()))?;
        if file.version != MODEL_FILE_VERSION {
            return Err(ScorerError::Version(file.version));
        }
        if let ScorerModel::Neural(net) = &file.model {
            net.validate().map_err(ScorerError::Format)?;
        }
        Ok(file.model)
    }
}

fn block_centroid(block: &[f64]) -> Vec3 {
    Vec3::new(block[0], block[1], block[2])
}

/// Median nearest-neighbour spacing of the distinct source positions in a
/// candidate batch; 1.0 when fewer than two sources are present.
fn median_source_spacing(candidates: &[CandidateAssociation]) -> f64 {
    let mut sources: Vec<(u32, Vec3)> = Vec::new();
    for c in candidates {
        if sources.iter().all(|(id, _)| *id != c.source_id) {
            sources.push((c.source_id, block_centroid(c.feature.source_now())));
        }
    }
    if sources.len() < 2 {
        return 1.0;
    }
    let mut spacings: Vec<f64> = sources
        .iter()
        .map(|(id, p)| {
            sources
                .iter()
                .filter(|(other, _)| other != id)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    spacings.sort_by(f64::total_cmp);
    let mid = spacings.len() / 2;
    let median = if spacings.len() % 2 == 1 {
        spacings[mid]
    } else {
        (spacings[mid - 1] + spacings[mid]) / 2.0
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Loss weight for positive samples: negatives per positive, which keeps the
/// two classes balanced (with candidate lists of size N this is about N − 1).
fn positive_weight(set: &[TrainingSample]) -> f64 {
    let pos = set.iter().filter(|s| s.label).count();
    let neg = set.len() - pos;
    if pos == 0 || neg == 0 {
        1.0
    } else {
        neg as f64 / pos as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 32], learning_rate: 0.05, epochs: 40, batch_size: 32, rng_seed: 7 }
    }
}

/// Trains a classifier on labelled candidate windows. Returns the model and
/// the mean class-balanced loss over the full set after each epoch (empty for
/// `epochs == 0`, which returns the bare initialization). Deterministic for a
/// fixed `rng_seed`.
pub fn train(
    set: &[TrainingSample],
    config: &TrainConfig,
) -> Result<(NeuralModel, Vec<f64>), ScorerError> {
    if set.is_empty() {
        return Err(ScorerError::EmptySet);
    }
    let width = set[0].feature.len();
    if let Some(s) = set.iter().find(|s| s.feature.len() != width) {
        return Err(ScorerError::MixedWidths { a: width, b: s.feature.len() });
    }
    let pos = set.iter().filter(|s| s.label).count();
    if pos == 0 || pos == set.len() {
        return Err(ScorerError::SingleClass);
    }
    if config.hidden.is_empty() || config.hidden.contains(&0) {
        return Err(ScorerError::BadHyper("hidden sizes must be nonzero".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(ScorerError::BadHyper("learning rate must be positive".into()));
    }
    if config.batch_size == 0 {
        return Err(ScorerError::BadHyper("batch size must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut model = NeuralModel::random(width, &config.hidden, &mut rng);
    // Z-score statistics come from the training set; constant dimensions keep
    // std 1 so they pass through unchanged.
    for d in 0..width {
        let mean = set.iter().map(|s| s.feature.values()[d]).sum::<f64>() / set.len() as f64;
        let var = set.iter().map(|s| (s.feature.values()[d] - mean).powi(2)).sum::<f64>()
            / set.len() as f64;
        model.norm_mean[d] = mean;
        model.norm_std[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }

    let pos_weight = positive_weight(set);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Layer> = model
                .layers
                .iter()
                .map(|l| Layer::zeroed(l.weights[0].len(), l.weights.len()))
                .collect();
            for &idx in batch {
                let sample = &set[idx];
                let y = if sample.label { 1.0 } else { 0.0 };
                let w = if sample.label { pos_weight } else { 1.0 };
                let g = model.backprop(&sample.feature, y, w);
                for (acc, layer) in grads.iter_mut().zip(g) {
                    for (arow, grow) in acc.weights.iter_mut().zip(layer.weights) {
                        for (a, v) in arow.iter_mut().zip(grow) {
                            *a += v;
                        }
                    }
                    for (a, v) in acc.bias.iter_mut().zip(layer.bias) {
                        *a += v;
                    }
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            for (layer, grad) in model.layers.iter_mut().zip(&grads) {
                for (wrow, grow) in layer.weights.iter_mut().zip(&grad.weights) {
                    for (w, g) in wrow.iter_mut().zip(grow) {
                        *w -= step * g;
                    }
                }
                for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
                    *b -= step * g;
                }
            }
        }
        history.push(model.mean_loss(set));
    }
    Ok((model, history))
}

/// Builds a labelled training set from a sequence with oracle instance ids
/// (instance id equals ground-truth track id). For every frame pair each
/// source emits its nearest-neighbour candidates; the candidate that follows
/// the lineage (the same id, or the designated first daughter at a division)
/// is labelled positive, all others negative.
pub fn make_training_pairs(
    seq: &Sequence,
    gt: &GroundTruthLineage,
    r: usize,
    n_candidates: usize,
) -> TrainingSet {
    let mut out = Vec::new();
    let mut chains: std::collections::BTreeMap<u32, Vec<FeatureVector9>> = Default::default();
    let no_displacements = Default::default();
    for t in 0..seq.num_frames().saturating_sub(1) {
        let frame_t = &seq.frames[t];
        let frame_t1 = &seq.frames[t + 1];
        for obs in frame_t.iter() {
            chains.entry(obs.instance_id).or_default().push(instance_feature(obs));
        }
        let candidates = generate_candidates(
            frame_t,
            frame_t1,
            n_candidates,
            ProjectionMode::ConstantPosition,
            &no_displacements,
            &chains,
            r,
        );
        for c in candidates {
            let continuation = if frame_t1.get(c.source_id).is_some() {
                Some(c.source_id)
            } else {
                gt.division_events
                    .iter()
                    .find(|e| e.parent == c.source_id && e.frame == t + 1)
                    .map(|e| e.child_a)
            };
            out.push(TrainingSample {
                feature: c.feature,
                label: continuation == Some(c.target_id),
            });
        }
    }
    out
}

/// Compares analytic gradients against central finite differences (step 1e-5)
/// over every parameter; returns the largest relative error.
pub fn gradient_check(
    model: &NeuralModel,
    feature: &SpatiotemporalFeature,
    label: bool,
) -> Result<f64, ScorerError> {
    const STEP: f64 = 1e-5;
    let y = if label { 1.0 } else { 0.0 };
    let analytic = model.backprop(feature, y, 1.0);
    let flat: Vec<f64> = {
        let mut v = Vec::new();
        for layer in &analytic {
            for row in &layer.weights {
                v.extend_from_slice(row);
            }
            v.extend_from_slice(&layer.bias);
        }
        v
    };
    let loss_at = |m: &NeuralModel| -> Result<f64, ScorerError> {
        Ok(bce_logit(m.logit_for(feature)?, y))
    };
    let mut worst: f64 = 0.0;
    for (i, a) in flat.iter().enumerate() {
        let mut plus = model.clone();
        *plus.params_mut()[i] += STEP;
        let mut minus = model.clone();
        *minus.params_mut()[i] -= STEP;
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * STEP);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
