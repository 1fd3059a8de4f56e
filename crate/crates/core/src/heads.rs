//! Classifier heads on top of a frozen extractor.
//!
//! * NCM: nearest class mean in Euclidean distance.
//! * FeTrIL: a linear softmax head retrained at every step on the new
//!   classes' features plus pseudo-features of past classes, obtained by
//!   translating new-class features onto the stored past prototypes.
//! * FeCAM: Mahalanobis distance on Tukey-transformed features with a
//!   shrunk, correlation-normalized covariance per class.
//!
//! Only prototypes, per-class statistics and classifier weights survive a
//! step. The features handed to [`HeadState::update`] are consumed and
//! dropped before it returns.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{mean_of, squared_distance, ClassId};
use crate::error::{Error, Result};
use crate::extractor::{train_linear_head, train_linear_head_from, LinearHeadWeights, TrainConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: ClassId,
    pub mean_feature: Vec<f64>,
    pub count: usize,
}

impl ClassPrototype {
    pub fn from_features(class_id: ClassId, features: &[Vec<f64>]) -> Result<Self> {
        let dim = features
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Training(format!("class {class_id} has no features")))?;
        check_dims(features, dim)?;
        let (mean_feature, count) = mean_of(features.iter().map(Vec::as_slice), dim);
        Ok(Self {
            class_id,
            mean_feature,
            count,
        })
    }
}

fn check_dims(features: &[Vec<f64>], dim: usize) -> Result<()> {
    match features.iter().find(|f| f.len() != dim) {
        Some(f) => Err(Error::Shape {
            expected: dim,
            actual: f.len(),
        }),
        None => Ok(()),
    }
}

/// Index of the smallest score, ties resolved toward the lowest class id.
fn argmin_by_class(scores: impl Iterator<Item = (ClassId, f64)>) -> Option<ClassId> {
    let mut best: Option<(f64, ClassId)> = None;
    for (c, s) in scores {
        best = match best {
            Some((bs, bc)) if s > bs || (s == bs && c > bc) => Some((bs, bc)),
            _ => Some((s, c)),
        };
    }
    best.map(|(_, c)| c)
}

pub fn ncm_predict(prototypes: &[ClassPrototype], x: &[f64]) -> Result<ClassId> {
    for p in prototypes {
        if p.mean_feature.len() != x.len() {
            return Err(Error::Shape {
                expected: p.mean_feature.len(),
                actual: x.len(),
            });
        }
    }
    argmin_by_class(prototypes.iter().map(|p| (p.class_id, squared_distance(&p.mean_feature, x))))
        .ok_or_else(|| Error::Evaluation("no prototypes to compare against".into()))
}

/// Translate donor features by `target_mean - donor_mean`.
pub fn fetril_pseudo_features(
    donor_features: &[Vec<f64>],
    donor_mean: &[f64],
    target_mean: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if donor_features.is_empty() {
        return Err(Error::Training("empty donor set".into()));
    }
    if donor_mean.len() != target_mean.len() {
        return Err(Error::Shape {
            expected: donor_mean.len(),
            actual: target_mean.len(),
        });
    }
    check_dims(donor_features, donor_mean.len())?;
    let shift: Vec<f64> = target_mean.iter().zip(donor_mean).map(|(t, d)| t - d).collect();
    Ok(donor_features
        .iter()
        .map(|f| f.iter().zip(&shift).map(|(x, s)| x + s).collect())
        .collect())
}

/// Which new class lends its features to a past class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DonorRule {
    /// The new class whose prototype is closest in Euclidean distance.
    #[default]
    NearestPrototype,
}

impl DonorRule {
    pub fn select(&self, past: &ClassPrototype, new: &[ClassPrototype]) -> Option<ClassId> {
        match self {
            DonorRule::NearestPrototype => argmin_by_class(
                new.iter()
                    .map(|n| (n.class_id, squared_distance(&n.mean_feature, &past.mean_feature))),
            ),
        }
    }
}

/// Tukey power transform `sign(x) |x|^lambda`, elementwise.
pub fn tukey(x: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 1.0 {
        return x.to_vec();
    }
    x.iter().map(|&v| v.signum() * v.abs().powf(lambda)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeCamClassStats {
    pub class_id: ClassId,
    pub proto_t: Vec<f64>,
    pub cov_normalized: DMatrix<f64>,
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub count: usize,
}

impl FeCamClassStats {
    /// Replace the covariance by the identity; FeCAM then reduces to a
    /// nearest-mean rule on transformed features.
    pub fn with_identity_covariance(mut self) -> Self {
        let d = self.proto_t.len();
        self.cov_normalized = DMatrix::identity(d, d);
        self
    }
}

/// Sample covariance of `rows` (unbiased, `n - 1` denominator) and the mean.
fn covariance(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, DMatrix<f64>) {
    let (mean, n) = mean_of(rows.iter().map(Vec::as_slice), dim);
    let mut centered = DMatrix::<f64>::zeros(dim, n);
    for (j, r) in rows.iter().enumerate() {
        for i in 0..dim {
            centered[(i, j)] = r[i] - mean[i];
        }
    }
    let cov = &centered * centered.transpose() / (n as f64 - 1.0);
    (mean, cov)
}

/// Shrink a covariance: `S + gamma1 * mean(diag) * I + gamma2 * mean(offdiag) * (J - I)`.
pub fn shrink_covariance(cov: &DMatrix<f64>, gamma1: f64, gamma2: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let diag_sum: f64 = cov.diagonal().sum();
    let diag_mean = diag_sum / d as f64;
    let off_mean = if d > 1 {
        (cov.sum() - diag_sum) / (d * (d - 1)) as f64
    } else {
        0.0
    };
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            cov[(i, j)] + gamma1 * diag_mean
        } else {
            cov[(i, j)] + gamma2 * off_mean
        }
    })
}

/// `S_ij / sqrt(S_ii S_jj)`; `None` if a diagonal entry is not positive.
pub fn correlation_normalize(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = cov.nrows();
    let scale: Vec<f64> = (0..d).map(|i| cov[(i, i)]).collect();
    if scale.iter().any(|&s| !(s > 0.0)) {
        return None;
    }
    let sqrt: Vec<f64> = scale.iter().map(|s| s.sqrt()).collect();
    Some(DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (sqrt[i] * sqrt[j])
        }
    }))
}

pub fn fecam_fit_class(
    class_id: ClassId,
    features: &[Vec<f64>],
    lambda: f64,
    gamma1: f64,
    gamma2: f64,
) -> Result<FeCamClassStats> {
    if features.len() < 2 {
        return Err(Error::Statistics {
            class_id,
            reason: format!("needs at least 2 features, got {}", features.len()),
        });
    }
    let dim = features[0].len();
    check_dims(features, dim)?;
    let transformed: Vec<Vec<f64>> = features.iter().map(|f| tukey(f, lambda)).collect();
    let (proto_t, cov) = covariance(&transformed, dim);
    let shrunk = shrink_covariance(&cov, gamma1, gamma2);
    let cov_normalized = correlation_normalize(&shrunk).ok_or_else(|| Error::Statistics {
        class_id,
        reason: "nonpositive variance after shrinkage (degenerate class)".into(),
    })?;
    Ok(FeCamClassStats {
        class_id,
        proto_t,
        cov_normalized,
        lambda,
        gamma1,
        gamma2,
        count: features.len(),
    })
}

/// Cholesky factorization with one jitter retry of `1e-8 * mean(diag) * I`.
pub fn factorize_spd(matrix: &DMatrix<f64>, class_id: ClassId) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(matrix.clone()) {
        return Ok(c);
    }
    let d = matrix.nrows();
    let jitter = 1e-8 * matrix.diagonal().sum() / d as f64;
    let repaired = matrix + DMatrix::identity(d, d) * jitter;
    Cholesky::new(repaired).ok_or_else(|| Error::Numerical {
        class_id,
        reason: "covariance is not positive definite after jitter".into(),
    })
}

/// Factorized FeCAM statistics ready for prediction.
#[derive(Debug, Clone)]
pub struct FecamModel {
    lambda: f64,
    /// Class, transformed prototype and inverse Cholesky factor, so that
    /// the distance is `|L^-1 (x - mu)|^2`.
    classes: Vec<(ClassId, DVector<f64>, DMatrix<f64>)>,
}

fn inverse_factor(matrix: &DMatrix<f64>, class_id: ClassId) -> Result<DMatrix<f64>> {
    let l = factorize_spd(matrix, class_id)?.l();
    let d = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Numerical {
            class_id,
            reason: "singular Cholesky factor".into(),
        })
}

impl FecamModel {
    pub fn prepare(stats: &[FeCamClassStats]) -> Result<Self> {
        let first = stats
            .first()
            .ok_or_else(|| Error::Evaluation("no FeCAM statistics".into()))?;
        let classes = stats
            .iter()
            .map(|s| {
                let inv = inverse_factor(&s.cov_normalized, s.class_id)?;
                Ok((s.class_id, DVector::from_column_slice(&s.proto_t), inv))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            lambda: first.lambda,
            classes,
        })
    }

    /// Add per-class factors for further classes.
    pub fn extend(&mut self, stats: &[FeCamClassStats]) -> Result<()> {
        for s in stats {
            let inv = inverse_factor(&s.cov_normalized, s.class_id)?;
            self.classes.push((s.class_id, DVector::from_column_slice(&s.proto_t), inv));
        }
        Ok(())
    }

    /// Use one covariance for every class: the mean of the per-class
    /// normalized covariances.
    pub fn prepare_shared(stats: &[FeCamClassStats]) -> Result<Self> {
        let first = stats
            .first()
            .ok_or_else(|| Error::Evaluation("no FeCAM statistics".into()))?;
        let mut shared = DMatrix::zeros(first.proto_t.len(), first.proto_t.len());
        for s in stats {
            shared += &s.cov_normalized;
        }
        shared /= stats.len() as f64;
        let inv = inverse_factor(&shared, first.class_id)?;
        Ok(Self {
            lambda: first.lambda,
            classes: stats
                .iter()
                .map(|s| (s.class_id, DVector::from_column_slice(&s.proto_t), inv.clone()))
                .collect(),
        })
    }

    fn dim(&self) -> usize {
        self.classes[0].1.len()
    }

    /// Squared Mahalanobis distance of `x` to every class.
    pub fn distances(&self, x: &[f64]) -> Result<Vec<(ClassId, f64)>> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let tx = DVector::from_vec(tukey(x, self.lambda));
        Ok(self
            .classes
            .iter()
            .map(|(c, mu, inv)| (*c, (inv * (&tx - mu)).norm_squared()))
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<ClassId> {
        Ok(argmin_by_class(self.distances(x)?.into_iter()).expect("nonempty model"))
    }

    pub fn predict_batch(&self, xs: &[&[f64]]) -> Result<Vec<ClassId>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.dim();
        if let Some(bad) = xs.iter().find(|x| x.len() != d) {
            return Err(Error::Shape {
                expected: d,
                actual: bad.len(),
            });
        }
        let n = xs.len();
        let data: Vec<f64> = xs.iter().flat_map(|x| tukey(x, self.lambda)).collect();
        let tx = DMatrix::from_vec(d, n, data);
        let mut best = vec![(f64::INFINITY, ClassId::MAX); n];
        let mut centered = tx.clone();
        let mut w = DMatrix::zeros(d, n);
        for (c, mu, inv) in &self.classes {
            centered.copy_from(&tx);
            for mut col in centered.column_iter_mut() {
                col -= mu;
            }
            w.gemm(1.0, inv, &centered, 0.0);
            for (j, col) in w.column_iter().enumerate() {
                let dist = col.norm_squared();
                if dist < best[j].0 || (dist == best[j].0 && *c < best[j].1) {
                    best[j] = (dist, *c);
                }
            }
        }
        Ok(best.into_iter().map(|(_, c)| c).collect())
    }
}

/// One-off FeCAM prediction; see [`FecamModel`] for repeated use.
pub fn fecam_predict(stats: &[FeCamClassStats], x: &[f64]) -> Result<ClassId> {
    FecamModel::prepare(stats)?.predict(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "ncm", alias = "NCM")]
    Ncm,
    #[serde(rename = "fetril", alias = "FeTrIL")]
    Fetril,
    #[serde(rename = "fecam", alias = "FeCAM")]
    Fecam,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Ncm, HeadKind::Fetril, HeadKind::Fecam];

    pub fn label(&self) -> &'static str {
        match self {
            HeadKind::Ncm => "NCM",
            HeadKind::Fetril => "FeTrIL",
            HeadKind::Fecam => "FeCAM",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncm" => Ok(HeadKind::Ncm),
            "fetril" => Ok(HeadKind::Fetril),
            "fecam" => Ok(HeadKind::Fecam),
            _ => Err(Error::Config(format!("unknown head kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FecamParams {
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(default)]
    pub shared_covariance: bool,
}

impl Default for FecamParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma1: 1.0,
            gamma2: 1.0,
            shared_covariance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FetrilParams {
    pub train: TrainConfig,
    #[serde(default)]
    pub donor_rule: DonorRule,
    /// Start each step's classifier from the previous step's weights
    /// instead of a fresh initialization.
    #[serde(default)]
    pub warm_start: bool,
}

impl Default for FetrilParams {
    fn default() -> Self {
        Self {
            train: TrainConfig::linear_head(),
            donor_rule: DonorRule::NearestPrototype,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default)]
    pub fecam: FecamParams,
    #[serde(default)]
    pub fetril: FetrilParams,
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            fecam: FecamParams::default(),
            fetril: FetrilParams::default(),
        }
    }
}

/// Per-class training features handed to a head for one step.
pub type StepFeatures = BTreeMap<ClassId, Vec<Vec<f64>>>;

/// Everything a head keeps between steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadState {
    pub config: HeadConfig,
    pub prototypes: Vec<ClassPrototype>,
    pub linear: Option<LinearHeadWeights>,
    pub fecam_stats: Option<Vec<FeCamClassStats>>,
    pub steps_fitted: usize,
    #[serde(skip)]
    fecam_model: Option<FecamModel>,
}

impl PartialEq for HeadState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.prototypes == other.prototypes
            && self.linear == other.linear
            && self.fecam_stats == other.fecam_stats
            && self.steps_fitted == other.steps_fitted
    }
}

impl HeadState {
    pub fn new(config: HeadConfig) -> Self {
        let fecam_stats = (config.kind == HeadKind::Fecam).then(Vec::new);
        Self {
            config,
            prototypes: Vec::new(),
            linear: None,
            fecam_stats,
            steps_fitted: 0,
            fecam_model: None,
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.config.kind
    }

    /// Classes covered so far, in the order they were added.
    pub fn classes(&self) -> Vec<ClassId> {
        self.prototypes.iter().map(|p| p.class_id).collect()
    }

    /// Number of `f64` values held by the head. Independent of how many
    /// samples each class was fitted on.
    pub fn retained_floats(&self) -> usize {
        let protos: usize = self.prototypes.iter().map(|p| p.mean_feature.len()).sum();
        let linear = self
            .linear
            .as_ref()
            .map_or(0, |l| l.matrix.len() + l.bias.len());
        let stats: usize = self
            .fecam_stats
            .iter()
            .flatten()
            .map(|s| s.proto_t.len() + s.cov_normalized.len())
            .sum();
        protos + linear + stats
    }

    /// Fold one step's classes into the head. The features are consumed.
    pub fn update(&mut self, new_features: StepFeatures) -> Result<()> {
        if new_features.is_empty() {
            return Err(Error::Protocol("a step must introduce at least one class".into()));
        }
        if let Some(c) = new_features
            .keys()
            .find(|c| self.prototypes.iter().any(|p| p.class_id == **c))
        {
            return Err(Error::Protocol(format!("class {c} was already learned in a previous step")));
        }
        let new_protos = new_features
            .iter()
            .map(|(c, f)| ClassPrototype::from_features(*c, f))
            .collect::<Result<Vec<_>>>()?;
        if let Some(dim) = self.prototypes.first().map(|p| p.mean_feature.len()) {
            if let Some(p) = new_protos.iter().find(|p| p.mean_feature.len() != dim) {
                return Err(Error::Shape {
                    expected: dim,
                    actual: p.mean_feature.len(),
                });
            }
        }

        match self.config.kind {
            HeadKind::Ncm => {}
            HeadKind::Fetril => {
                let head = self.fetril_retrain(&new_features, &new_protos)?;
                self.linear = Some(head);
            }
            HeadKind::Fecam => {
                let p = &self.config.fecam;
                let fitted = new_features
                    .iter()
                    .map(|(c, f)| fecam_fit_class(*c, f, p.lambda, p.gamma1, p.gamma2))
                    .collect::<Result<Vec<_>>>()?;
                let stats = self.fecam_stats.get_or_insert_with(Vec::new);
                let first_new = stats.len();
                stats.extend(fitted);
                self.fecam_model = Some(match (p.shared_covariance, self.fecam_model.take()) {
                    (true, _) => FecamModel::prepare_shared(stats)?,
                    // Past classes keep their factors; only new ones are factorized.
                    (false, Some(mut model)) => {
                        model.extend(&stats[first_new..])?;
                        model
                    }
                    (false, None) => FecamModel::prepare(stats)?,
                });
            }
        }
        self.prototypes.extend(new_protos);
        self.steps_fitted += 1;
        Ok(())
    }

    fn fetril_retrain(&self, new_features: &StepFeatures, new_protos: &[ClassPrototype]) -> Result<LinearHeadWeights> {
        let params = &self.config.fetril;
        let mut train: Vec<(Vec<f64>, ClassId)> = Vec::new();
        for (c, feats) in new_features {
            train.extend(feats.iter().map(|f| (f.clone(), *c)));
        }
        for past in &self.prototypes {
            let donor_id = params
                .donor_rule
                .select(past, new_protos)
                .expect("at least one new class");
            let donor = new_protos.iter().find(|p| p.class_id == donor_id).unwrap();
            let pseudo = fetril_pseudo_features(&new_features[&donor_id], &donor.mean_feature, &past.mean_feature)?;
            train.extend(pseudo.into_iter().map(|f| (f, past.class_id)));
        }
        let class_ids: Vec<ClassId> = self
            .prototypes
            .iter()
            .chain(new_protos)
            .map(|p| p.class_id)
            .collect();
        let mut cfg = params.train.clone();
        cfg.shuffle_seed = derive_seed(cfg.shuffle_seed, self.steps_fitted as u64);
        match (&self.linear, params.warm_start) {
            (Some(previous), true) => train_linear_head_from(&train, previous, &class_ids, &cfg),
            _ => train_linear_head(&train, &class_ids, &cfg),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<ClassId> {
        match self.config.kind {
            HeadKind::Ncm => ncm_predict(&self.prototypes, x),
            HeadKind::Fetril => self.fitted_linear()?.predict(x),
            HeadKind::Fecam => self.fitted_fecam()?.predict(x),
        }
    }

    pub fn predict_batch(&self, xs: &[&[f64]]) -> Result<Vec<ClassId>> {
        match self.config.kind {
            HeadKind::Fecam => self.fitted_fecam()?.predict_batch(xs),
            HeadKind::Fetril => {
                let head = self.fitted_linear()?;
                let d = head.feature_dim();
                if let Some(bad) = xs.iter().find(|x| x.len() != d) {
                    return Err(Error::Shape {
                        expected: d,
                        actual: bad.len(),
                    });
                }
                let data: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
                let logits = &head.matrix * DMatrix::from_vec(d, xs.len(), data);
                Ok(logits
                    .column_iter()
                    .map(|col| {
                        let mut best = (f64::NEG_INFINITY, ClassId::MAX);
                        for ((z, b), c) in col.iter().zip(head.bias.iter()).zip(&head.class_ids) {
                            let v = z + b;
                            if v > best.0 || (v == best.0 && *c < best.1) {
                                best = (v, *c);
                            }
                        }
                        best.1
                    })
                    .collect())
            }
            HeadKind::Ncm => xs.iter().map(|x| ncm_predict(&self.prototypes, x)).collect(),
        }
    }

    fn fitted_linear(&self) -> Result<&LinearHeadWeights> {
        self.linear
            .as_ref()
            .ok_or_else(|| Error::Evaluation("FeTrIL head has not been fitted".into()))
    }

    fn fitted_fecam(&self) -> Result<&FecamModel> {
        self.fecam_model
            .as_ref()
            .ok_or_else(|| Error::Evaluation("FeCAM head has not been fitted".into()))
    }

    /// Rebuild derived prediction state after deserialization.
    pub fn restore(&mut self) -> Result<()> {
        if let (HeadKind::Fecam, Some(stats)) = (self.config.kind, &self.fecam_stats) {
            if !stats.is_empty() {
                self.fecam_model = Some(if self.config.fecam.shared_covariance {
                    FecamModel::prepare_shared(stats)?
                } else {
                    FecamModel::prepare(stats)?
                });
            }
        }
        Ok(())
    }
}
