//! Feature extractor and linear classifier training.
//!
//! The extractor is a rectified MLP whose last hidden layer is the feature
//! space. During the initial step it is trained jointly with a linear
//! softmax head on real initial-step data plus synthetic auxiliary data,
//! then frozen. Batches are stored column-wise: one sample per column.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ClassId, EmbeddingSample};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

const STREAM_SHUFFLE: u64 = 11;
const STREAM_JITTER: u64 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl DenseLayer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: DMatrix::zeros(self.weights.nrows(), self.weights.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpExtractor {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
    frozen: bool,
}

/// Linear softmax classifier over a fixed, ordered list of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHeadWeights {
    /// `num_classes x feature_dim`.
    pub matrix: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub class_ids: Vec<ClassId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    pub shuffle_seed: u64,
    pub augment_noise_sd: f64,
}

impl Default for TrainConfig {
    /// Backbone recipe: 160 epochs, batch 128, lr 0.1 annealed to zero,
    /// weight decay 5e-4.
    fn default() -> Self {
        Self {
            epochs: 160,
            batch_size: 128,
            lr_init: 0.1,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 5e-4,
            momentum: 0.9,
            shuffle_seed: 0,
            augment_noise_sd: 0.1,
        }
    }
}

impl TrainConfig {
    /// Classifier recipe used at every incremental step: 50 epochs, lr 0.1.
    pub fn linear_head() -> Self {
        Self {
            epochs: 50,
            augment_noise_sd: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_init > 0.0) {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0 and momentum in [0, 1); got {} and {}",
                self.weight_decay, self.momentum
            )));
        }
        if !(self.augment_noise_sd >= 0.0) {
            return Err(Error::Config("augment_noise_sd must be nonnegative".into()));
        }
        Ok(())
    }

    /// Learning rate at update `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Cosine => cosine_lr(self.lr_init, step, total),
            LrSchedule::Constant => self.lr_init,
        }
    }
}

/// `lr_init * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(lr_init: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_init;
    }
    lr_init * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
/// zero biases.
pub fn init_extractor(layer_dims: &[usize], init_seed: u64) -> Result<MlpExtractor> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "extractor needs at least two positive layer dims, got {layer_dims:?}"
        )));
    }
    let mut rng = SplitMix64::new(init_seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            DenseLayer {
                weights: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.uniform(-bound, bound)),
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpExtractor {
        layer_dims: layer_dims.to_vec(),
        layers,
        frozen: false,
    })
}

impl MlpExtractor {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("extractor needs at least one layer".into()))?;
        let mut dims = vec![first.weights.ncols()];
        for l in &layers {
            if l.weights.ncols() != *dims.last().unwrap() || l.bias.len() != l.weights.nrows() {
                return Err(Error::Config("inconsistent layer shapes".into()));
            }
            dims.push(l.weights.nrows());
        }
        Ok(Self {
            layer_dims: dims,
            layers,
            frozen: false,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable access to the layers; fails once frozen.
    pub fn layers_mut(&mut self) -> Result<&mut [DenseLayer]> {
        self.ensure_trainable()?;
        Ok(&mut self.layers)
    }

    fn ensure_trainable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::Protocol("the feature extractor is frozen".into()))
        } else {
            Ok(())
        }
    }

    /// SHA-256 over the layer dims and the little-endian weight bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.layer_dims {
            h.update((*d as u64).to_le_bytes());
        }
        for l in &self.layers {
            for x in l.weights.iter().chain(l.bias.iter()) {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Forward pass of one vector to the last hidden layer.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut h = DVector::from_column_slice(x);
        for l in &self.layers {
            h = &l.weights * h + &l.bias;
            h.apply(|v| *v = v.max(0.0));
        }
        Ok(h.as_slice().to_vec())
    }

    /// Embed many samples at once, keeping labels and tags.
    pub fn embed_samples(&self, samples: &[EmbeddingSample]) -> Result<Vec<EmbeddingSample>> {
        if let Some(bad) = samples.iter().find(|s| s.dim() != self.input_dim()) {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: bad.dim(),
            });
        }
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(512) {
            let x = columns(chunk.iter().map(|s| s.features.as_slice()), self.input_dim());
            let h = forward(&self.layers, &x).pop().unwrap();
            for (s, col) in chunk.iter().zip(h.column_iter()) {
                out.push(EmbeddingSample::new(col.as_slice().to_vec(), s.class_id, s.origin, s.split));
            }
        }
        Ok(out)
    }
}

impl LinearHeadWeights {
    /// Uniform `U(-1/sqrt(f), 1/sqrt(f))` weights and zero biases.
    pub fn init(class_ids: &[ClassId], feature_dim: usize, seed: u64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = class_ids.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::Config(format!("duplicate class id {dup} in head")));
        }
        let mut rng = SplitMix64::new(seed);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        Ok(Self {
            matrix: DMatrix::from_fn(class_ids.len(), feature_dim, |_, _| rng.uniform(-bound, bound)),
            bias: DVector::zeros(class_ids.len()),
            class_ids: class_ids.to_vec(),
        })
    }

    pub fn zeros(class_ids: &[ClassId], feature_dim: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(class_ids.len(), feature_dim),
            bias: DVector::zeros(class_ids.len()),
            class_ids: class_ids.to_vec(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn row_index(&self) -> HashMap<ClassId, usize> {
        self.class_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect()
    }

    pub fn logits(&self, feature: &[f64]) -> Result<DVector<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Shape {
                expected: self.feature_dim(),
                actual: feature.len(),
            });
        }
        Ok(&self.matrix * DVector::from_column_slice(feature) + &self.bias)
    }

    /// Class of the largest logit; ties go to the lowest class id.
    pub fn predict(&self, feature: &[f64]) -> Result<ClassId> {
        let z = self.logits(feature)?;
        let mut best = (f64::NEG_INFINITY, ClassId::MAX);
        for (v, c) in z.iter().zip(&self.class_ids) {
            if *v > best.0 || (*v == best.0 && *c < best.1) {
                best = (*v, *c);
            }
        }
        Ok(best.1)
    }

    /// Keep the rows of `keep`, in that order.
    pub fn restrict(&self, keep: &[ClassId]) -> Result<Self> {
        let index = self.row_index();
        let rows: Vec<usize> = keep
            .iter()
            .map(|c| {
                index
                    .get(c)
                    .copied()
                    .ok_or_else(|| Error::Protocol(format!("class {c} is not covered by the classifier")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            matrix: self.matrix.select_rows(rows.iter()),
            bias: self.bias.select_rows(rows.iter()),
            class_ids: keep.to_vec(),
        })
    }
}

/// Gradients with the same shapes as the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
    pub head: LinearHeadWeights,
}

impl Gradients {
    /// Parameters flattened in the order of [`flatten_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.layers, &self.head)
    }
}

/// Every parameter as one vector: per layer weights (column-major) then
/// bias, then head matrix and head bias.
pub fn flatten_parameters(extractor: &MlpExtractor, head: &LinearHeadWeights) -> Vec<f64> {
    flatten(&extractor.layers, head)
}

/// Inverse of [`flatten_parameters`]; fails on a frozen extractor.
pub fn assign_parameters(extractor: &mut MlpExtractor, head: &mut LinearHeadWeights, flat: &[f64]) -> Result<()> {
    extractor.ensure_trainable()?;
    let mut it = flat.iter().copied();
    let mut fill = |dst: &mut [f64]| {
        for v in dst {
            *v = it.next().expect("parameter vector too short");
        }
    };
    for l in &mut extractor.layers {
        fill(l.weights.as_mut_slice());
        fill(l.bias.as_mut_slice());
    }
    fill(head.matrix.as_mut_slice());
    fill(head.bias.as_mut_slice());
    Ok(())
}

fn flatten(layers: &[DenseLayer], head: &LinearHeadWeights) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out.extend(head.matrix.iter());
    out.extend(head.bias.iter());
    out
}

fn columns<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> DMatrix<f64> {
    let data: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = data.len() / dim.max(1);
    DMatrix::from_vec(dim, n, data)
}

/// Activations of every layer, input included.
fn forward(layers: &[DenseLayer], x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.clone());
    for l in layers {
        let mut z = &l.weights * acts.last().unwrap();
        for mut col in z.column_iter_mut() {
            col += &l.bias;
            col.apply(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// Mean softmax cross-entropy plus `weight_decay / 2 * sum(w^2)` over all
/// weight matrices (biases exempt), with exact gradients.
fn batch_loss_grads(
    layers: &[DenseLayer],
    head: &LinearHeadWeights,
    x: &DMatrix<f64>,
    targets: &[usize],
    weight_decay: f64,
) -> (f64, Gradients) {
    let b = targets.len();
    let acts = forward(layers, x);
    let features = acts.last().unwrap();
    let mut logits = &head.matrix * features;
    for mut col in logits.column_iter_mut() {
        col += &head.bias;
    }

    // Softmax in place, accumulating the cross-entropy.
    let mut ce = 0.0;
    for (mut col, &t) in logits.column_iter_mut().zip(targets) {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        ce -= (col[t] / sum).ln();
        col /= sum;
    }
    // d loss / d logits = (p - onehot) / B
    let mut delta = logits;
    for (mut col, &t) in delta.column_iter_mut().zip(targets) {
        col[t] -= 1.0;
    }
    delta /= b as f64;

    let mut loss = ce / b as f64;
    let mut sq = head.matrix.norm_squared();
    for l in layers {
        sq += l.weights.norm_squared();
    }
    loss += 0.5 * weight_decay * sq;

    let head_grad = LinearHeadWeights {
        matrix: &delta * features.transpose() + weight_decay * &head.matrix,
        bias: delta.column_sum(),
        class_ids: head.class_ids.clone(),
    };

    let mut layer_grads: Vec<DenseLayer> = layers.iter().map(DenseLayer::zeros_like).collect();
    if !layers.is_empty() {
        let mut upstream = head.matrix.transpose() * &delta;
        for i in (0..layers.len()).rev() {
            // Rectifier derivative: 1 where the output is positive.
            upstream.zip_apply(&acts[i + 1], |g, a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            layer_grads[i].weights = &upstream * acts[i].transpose() + weight_decay * &layers[i].weights;
            layer_grads[i].bias = upstream.column_sum();
            if i > 0 {
                upstream = layers[i].weights.transpose() * &upstream;
            }
        }
    }

    (
        loss,
        Gradients {
            layers: layer_grads,
            head: head_grad,
        },
    )
}

fn targets_for(head: &LinearHeadWeights, labels: impl Iterator<Item = ClassId>) -> Result<Vec<usize>> {
    let index = head.row_index();
    labels
        .map(|c| {
            index
                .get(&c)
                .copied()
                .ok_or_else(|| Error::Training(format!("class {c} is not covered by the classifier")))
        })
        .collect()
}

/// Loss and exact gradients of the joint network on one batch.
pub fn loss_and_grads(
    extractor: &MlpExtractor,
    head: &LinearHeadWeights,
    batch: &[EmbeddingSample],
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    extractor.ensure_trainable()?;
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    if let Some(bad) = batch.iter().find(|s| s.dim() != extractor.input_dim()) {
        return Err(Error::Shape {
            expected: extractor.input_dim(),
            actual: bad.dim(),
        });
    }
    if head.feature_dim() != extractor.feature_dim() {
        return Err(Error::Shape {
            expected: extractor.feature_dim(),
            actual: head.feature_dim(),
        });
    }
    let targets = targets_for(head, batch.iter().map(|s| s.class_id))?;
    let x = columns(batch.iter().map(|s| s.features.as_slice()), extractor.input_dim());
    Ok(batch_loss_grads(&extractor.layers, head, &x, &targets, weight_decay))
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Momentum SGD over shuffled mini-batches with the configured learning
/// rate schedule. The last partial batch is kept. Gaussian jitter of
/// `augment_noise_sd` is added to inputs as batches are assembled.
fn sgd_train(
    layers: &mut [DenseLayer],
    head: &mut LinearHeadWeights,
    x_all: &DMatrix<f64>,
    targets: &[usize],
    config: &TrainConfig,
) -> TrainLog {
    let n = targets.len();
    let dim = x_all.nrows();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let root = SplitMix64::new(config.shuffle_seed);
    let mut shuffle_rng = root.fork(STREAM_SHUFFLE);
    let mut jitter_rng = root.fork(STREAM_JITTER);

    let mut vel_layers: Vec<DenseLayer> = layers.iter().map(DenseLayer::zeros_like).collect();
    let mut vel_head = LinearHeadWeights::zeros(&[], 0);
    vel_head.matrix = DMatrix::zeros(head.matrix.nrows(), head.matrix.ncols());
    vel_head.bias = DVector::zeros(head.bias.len());

    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut x = DMatrix::<f64>::zeros(dim, chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                x.set_column(j, &x_all.column(i));
            }
            if config.augment_noise_sd > 0.0 {
                let sd = config.augment_noise_sd;
                x.iter_mut().for_each(|v| *v += sd * jitter_rng.normal());
            }
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = batch_loss_grads(layers, head, &x, &batch_targets, config.weight_decay);
            epoch_loss += loss * chunk.len() as f64;

            let lr = config.lr_at(step, total_steps);
            let mu = config.momentum;
            for ((p, v), g) in layers.iter_mut().zip(&mut vel_layers).zip(&grads.layers) {
                v.weights *= mu;
                v.weights += &g.weights;
                v.bias *= mu;
                v.bias += &g.bias;
                p.weights -= lr * &v.weights;
                p.bias -= lr * &v.bias;
            }
            vel_head.matrix *= mu;
            vel_head.matrix += &grads.head.matrix;
            vel_head.bias *= mu;
            vel_head.bias += &grads.head.bias;
            head.matrix -= lr * &vel_head.matrix;
            head.bias -= lr * &vel_head.bias;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / n as f64);
    }
    log
}

/// Joint training of extractor and head on the initial-step data
/// (real initial classes plus synthetic auxiliary classes).
pub fn train_initial(
    extractor: &mut MlpExtractor,
    head: &mut LinearHeadWeights,
    data: &[EmbeddingSample],
    config: &TrainConfig,
) -> Result<TrainLog> {
    extractor.ensure_trainable()?;
    config.validate()?;
    if head.feature_dim() != extractor.feature_dim() {
        return Err(Error::Shape {
            expected: extractor.feature_dim(),
            actual: head.feature_dim(),
        });
    }
    if let Some(bad) = data.iter().find(|s| s.dim() != extractor.input_dim()) {
        return Err(Error::Shape {
            expected: extractor.input_dim(),
            actual: bad.dim(),
        });
    }
    let targets = targets_for(head, data.iter().map(|s| s.class_id))?;
    ensure_coverage(head, &targets)?;
    let x = columns(data.iter().map(|s| s.features.as_slice()), extractor.input_dim());
    Ok(sgd_train(&mut extractor.layers, head, &x, &targets, config))
}

fn ensure_coverage(head: &LinearHeadWeights, targets: &[usize]) -> Result<()> {
    let mut present = vec![false; head.num_classes()];
    targets.iter().for_each(|&t| present[t] = true);
    match present.iter().position(|p| !p) {
        Some(missing) => Err(Error::Training(format!(
            "class {} has no training samples",
            head.class_ids[missing]
        ))),
        None => Ok(()),
    }
}

/// Freeze the extractor and keep only the classifier rows of `initial`.
pub fn finalize_initial_step(
    extractor: &mut MlpExtractor,
    head: &LinearHeadWeights,
    initial: &[ClassId],
) -> Result<LinearHeadWeights> {
    let restricted = head.restrict(initial)?;
    extractor.freeze();
    Ok(restricted)
}

/// Train a fresh softmax classifier on fixed features.
pub fn train_linear_head(
    features: &[(Vec<f64>, ClassId)],
    class_ids: &[ClassId],
    config: &TrainConfig,
) -> Result<LinearHeadWeights> {
    config.validate()?;
    let dim = features
        .first()
        .map(|(f, _)| f.len())
        .ok_or_else(|| Error::Training("no features to train on".into()))?;
    if let Some((f, _)) = features.iter().find(|(f, _)| f.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: f.len(),
        });
    }
    let mut head = LinearHeadWeights::init(class_ids, dim, config.shuffle_seed ^ 0x5EED_0F_4EAD)?;
    let targets = targets_for(&head, features.iter().map(|(_, c)| *c))?;
    ensure_coverage(&head, &targets)?;
    let x = columns(features.iter().map(|(f, _)| f.as_slice()), dim);
    sgd_train(&mut [], &mut head, &x, &targets, config);
    Ok(head)
}

/// Like [`train_linear_head`], but rows of classes already in `previous`
/// start from their previous values.
pub fn train_linear_head_from(
    features: &[(Vec<f64>, ClassId)],
    previous: &LinearHeadWeights,
    class_ids: &[ClassId],
    config: &TrainConfig,
) -> Result<LinearHeadWeights> {
    config.validate()?;
    let dim = previous.feature_dim();
    if let Some((f, _)) = features.iter().find(|(f, _)| f.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: f.len(),
        });
    }
    let mut head = LinearHeadWeights::init(class_ids, dim, config.shuffle_seed ^ 0x5EED_0F_4EAD)?;
    let old = previous.row_index();
    for (row, c) in class_ids.iter().enumerate() {
        if let Some(&src) = old.get(c) {
            head.matrix.set_row(row, &previous.matrix.row(src));
            head.bias[row] = previous.bias[src];
        }
    }
    let targets = targets_for(&head, features.iter().map(|(_, c)| *c))?;
    ensure_coverage(&head, &targets)?;
    let x = columns(features.iter().map(|(f, _)| f.as_slice()), dim);
    sgd_train(&mut [], &mut head, &x, &targets, config);
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Origin, Split};

    fn sample(x: Vec<f64>, c: ClassId) -> EmbeddingSample {
        EmbeddingSample::new(x, c, Origin::Real, Split::Train)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_extractor(&[4, 8], 1).unwrap();
        let b = init_extractor(&[4, 8], 1).unwrap();
        assert_eq!(a, b);
        let e = init_extractor(&[5, 7, 3], 2).unwrap();
        for l in e.layers() {
            let bound = (6.0 / l.weights.ncols() as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        assert!(!e.is_frozen());
        assert!(init_extractor(&[4], 0).is_err());
        assert!(init_extractor(&[4, 0], 0).is_err());
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut e = init_extractor(&[3, 4], 0).unwrap();
        for l in e.layers_mut().unwrap() {
            l.weights.fill(0.0);
        }
        let head = LinearHeadWeights::zeros(&[0, 1, 2, 3, 4], 4);
        let batch = vec![sample(vec![1.0, -2.0, 0.5], 3), sample(vec![0.0, 1.0, 1.0], 0)];
        let (loss, _) = loss_and_grads(&e, &head, &batch, 0.0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_input_kills_hidden_ce_gradient() {
        let e = init_extractor(&[3, 4, 2], 7).unwrap();
        let head = LinearHeadWeights::init(&[0, 1], 2, 3).unwrap();
        let lambda = 0.01;
        let batch = vec![sample(vec![0.0; 3], 0), sample(vec![0.0; 3], 0)];
        let (_, g) = loss_and_grads(&e, &head, &batch, lambda).unwrap();
        for (gl, l) in g.layers.iter().zip(e.layers()) {
            let expect = lambda * &l.weights;
            assert!((&gl.weights - expect).abs().max() < 1e-15);
            assert!(gl.bias.iter().all(|&b| b == 0.0));
        }
        // Head weights see zero features, so only decay remains; the bias
        // carries the cross-entropy term.
        assert!((&g.head.matrix - lambda * &head.matrix).abs().max() < 1e-15);
        assert!(g.head.bias.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn unknown_class_is_a_training_error() {
        let e = init_extractor(&[2, 2], 0).unwrap();
        let head = LinearHeadWeights::zeros(&[0, 1], 2);
        let err = loss_and_grads(&e, &head, &[sample(vec![1.0, 1.0], 9)], 0.0).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains('9')));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-12);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let layer = DenseLayer {
            weights: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
        };
        let e = MlpExtractor::from_layers(vec![layer]).unwrap();
        assert_eq!(e.embed(&[0.5, 0.0, 2.0]).unwrap(), vec![0.5, 0.0, 2.0]);
        assert!(matches!(e.embed(&[1.0]), Err(Error::Shape { expected: 3, actual: 1 })));
    }

    #[test]
    fn features_are_nonnegative() {
        let e = init_extractor(&[4, 16, 8], 3).unwrap();
        let mut rng = SplitMix64::new(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| 3.0 * rng.normal()).collect();
            assert!(e.embed(&x).unwrap().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn batched_embedding_matches_single() {
        let e = init_extractor(&[4, 16, 8], 3).unwrap();
        let mut rng = SplitMix64::new(2);
        let samples: Vec<_> = (0..20)
            .map(|i| sample((0..4).map(|_| rng.normal()).collect(), i % 3))
            .collect();
        let batched = e.embed_samples(&samples).unwrap();
        for (s, b) in samples.iter().zip(&batched) {
            let single = e.embed(&s.features).unwrap();
            for (x, y) in single.iter().zip(&b.features) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(b.class_id, s.class_id);
        }
    }

    #[test]
    fn restrict_keeps_rows_bitwise() {
        let ids: Vec<ClassId> = (0..20).collect();
        let head = LinearHeadWeights::init(&ids, 6, 9).unwrap();
        let keep: Vec<ClassId> = vec![7, 3, 15, 0, 19, 2, 4, 11, 8, 1];
        let r = head.restrict(&keep).unwrap();
        assert_eq!(r.num_classes(), 10);
        for (row, c) in keep.iter().enumerate() {
            let src = *c as usize;
            for j in 0..6 {
                assert_eq!(r.matrix[(row, j)].to_bits(), head.matrix[(src, j)].to_bits());
            }
            assert_eq!(r.bias[row].to_bits(), head.bias[src].to_bits());
        }
        assert!(matches!(head.restrict(&[42]), Err(Error::Protocol(_))));
    }

    #[test]
    fn frozen_extractor_rejects_mutation() {
        let mut e = init_extractor(&[3, 4], 0).unwrap();
        let head = LinearHeadWeights::init(&[0, 1], 4, 0).unwrap();
        let mut restricted = finalize_initial_step(&mut e, &head, &[1]).unwrap();
        assert!(e.is_frozen());
        assert!(e.layers_mut().is_err());
        let data = vec![sample(vec![1.0, 0.0, 0.0], 1)];
        let err = train_initial(&mut e, &mut restricted, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(loss_and_grads(&e, &restricted, &data, 0.0).is_err());
    }

    #[test]
    fn zero_epochs_is_config_error() {
        let mut e = init_extractor(&[2, 2], 0).unwrap();
        let mut head = LinearHeadWeights::init(&[0], 2, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let err = train_initial(&mut e, &mut head, &[sample(vec![1.0, 1.0], 0)], &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_class_is_training_error() {
        let mut e = init_extractor(&[2, 2], 0).unwrap();
        let mut head = LinearHeadWeights::init(&[0, 1], 2, 0).unwrap();
        let err = train_initial(&mut e, &mut head, &[sample(vec![1.0, 1.0], 0)], &TrainConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("class 1")));
        assert!(train_linear_head(&[(vec![1.0], 0)], &[0, 1], &TrainConfig::linear_head()).is_err());
    }

    #[test]
    fn conflicting_labels_bound_accuracy() {
        // The same 10 points carry label 0 and label 1: at most one of each
        // duplicated pair can be right.
        let mut feats = Vec::new();
        for i in 0..10 {
            let x = vec![i as f64 / 10.0, 1.0];
            feats.push((x.clone(), 0));
            feats.push((x, 1));
        }
        let head = train_linear_head(&feats, &[0, 1], &TrainConfig::linear_head()).unwrap();
        let correct = feats.iter().filter(|(x, c)| head.predict(x).unwrap() == *c).count();
        assert!(correct <= 10);
    }
}
