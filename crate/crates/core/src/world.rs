//! Simulated feature-space world.
//!
//! Each class is an isotropic Gaussian. "Real" draws come from the class
//! distribution; "synthetic" draws are shifted by `delta` along a fixed
//! per-class unit direction and have their spread multiplied by
//! `diversity_scale`, which models the gap between generated and real data.
//! The world also holds distractor classes outside the target catalog, used
//! when the auxiliary set contains wrongly predicted future classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, EmbeddingSample, Origin, Split};
use crate::error::{Error, Result};
use crate::protocol::IncrementalSchedule;
use crate::rng::{derive_seed_path, SplitMix64};

const STREAM_MEANS: u64 = 1;
const STREAM_GAP: u64 = 2;
const STREAM_AXES: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClassModel {
    pub class_id: ClassId,
    pub mean: Vec<f64>,
    pub intra_sd: f64,
    pub gap_direction: Vec<f64>,
    /// Per-coordinate sd multipliers; `None` for the isotropic default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_scales: Option<Vec<f64>>,
}

impl GaussianClassModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub intra_sd: f64,
    pub seed: u64,
    /// Extra classes outside the target catalog; ids start at `num_classes`.
    #[serde(default = "default_distractors")]
    pub num_distractors: usize,
    /// Log-sd of per-axis spread multipliers. Zero keeps classes isotropic.
    #[serde(default)]
    pub anisotropy: f64,
}

fn default_distractors() -> usize {
    100
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 100,
            dim: 64,
            separation: 6.0,
            intra_sd: 1.0,
            seed: 0,
            num_distractors: default_distractors(),
            anisotropy: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("world needs at least 2 classes, got {}", self.num_classes)));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("world dimension must be at least 2, got {}", self.dim)));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Config(format!("separation must be nonnegative, got {}", self.separation)));
        }
        if !(self.intra_sd > 0.0) || !self.intra_sd.is_finite() {
            return Err(Error::Config(format!("intra_sd must be positive, got {}", self.intra_sd)));
        }
        if !(self.anisotropy >= 0.0) {
            return Err(Error::Config(format!("anisotropy must be nonnegative, got {}", self.anisotropy)));
        }
        Ok(())
    }

    /// Expected distance between two class means: `separation * sqrt(2)
    /// * c_d`, with `c_d` the mean of a chi distribution with `d` degrees of
    /// freedom divided by `sqrt(d)`.
    pub fn expected_mean_distance(&self) -> f64 {
        let d = self.dim as f64;
        let chi_mean = std::f64::consts::SQRT_2 * (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp();
        self.separation * std::f64::consts::SQRT_2 * chi_mean / d.sqrt()
    }
}

/// Mean shift and spread multiplier of synthetic data relative to real data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapParams {
    pub delta: f64,
    pub diversity_scale: f64,
}

impl GapParams {
    pub const NONE: GapParams = GapParams {
        delta: 0.0,
        diversity_scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("gap delta must be nonnegative, got {}", self.delta)));
        }
        if !(self.diversity_scale > 0.0) || !self.diversity_scale.is_finite() {
            return Err(Error::Config(format!(
                "diversity_scale must be positive, got {}",
                self.diversity_scale
            )));
        }
        Ok(())
    }
}

impl Default for GapParams {
    fn default() -> Self {
        Self {
            delta: 2.0,
            diversity_scale: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AuxMode {
    None,
    Oracle,
    Partial { k: u32 },
    Explicit { classes: Vec<ClassId> },
}

impl AuxMode {
    pub fn label(&self) -> String {
        match self {
            AuxMode::None => "none".into(),
            AuxMode::Oracle => "oracle".into(),
            AuxMode::Partial { k } => format!("partial-{k}"),
            AuxMode::Explicit { classes } => format!("explicit-{}", classes.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxiliarySpec {
    pub mode: AuxMode,
    pub n_per_class: usize,
    pub gap: GapParams,
    /// Classes outside the target catalog available as wrong predictions.
    /// Empty means "every distractor class in the world".
    #[serde(default)]
    pub distractor_pool: Vec<ClassId>,
}

impl Default for AuxiliarySpec {
    fn default() -> Self {
        Self {
            mode: AuxMode::Oracle,
            n_per_class: 500,
            gap: GapParams::default(),
            distractor_pool: Vec::new(),
        }
    }
}

impl AuxiliarySpec {
    pub fn validate(&self, initial: &[ClassId]) -> Result<()> {
        self.gap.validate()?;
        match &self.mode {
            AuxMode::Partial { k } if *k > 100 => {
                Err(Error::Config(format!("partial(k) requires 0 <= k <= 100, got {k}")))
            }
            AuxMode::Explicit { classes } => {
                if let Some(c) = classes.iter().find(|c| initial.contains(c)) {
                    Err(Error::Config(format!("explicit auxiliary class {c} belongs to the initial step")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// A built world: target classes `0..num_classes` followed by distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub classes: Vec<GaussianClassModel>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let classes = build_world(&config)?;
        Ok(Self { config, classes })
    }

    pub fn model(&self, class_id: ClassId) -> Result<&GaussianClassModel> {
        self.classes
            .get(class_id as usize)
            .ok_or_else(|| Error::Config(format!("class {class_id} is not part of the world")))
    }

    pub fn distractor_ids(&self) -> Vec<ClassId> {
        (self.config.num_classes..self.classes.len()).map(|c| c as ClassId).collect()
    }

    /// Draw `n` samples of `class_id` with a seed derived from the world seed
    /// and the `(purpose, class_id)` path.
    pub fn sample(
        &self,
        class_id: ClassId,
        n: usize,
        origin: Origin,
        split: Split,
        gap: GapParams,
        purpose: u64,
    ) -> Result<Vec<EmbeddingSample>> {
        let seed = derive_seed_path(self.config.seed, &[purpose, class_id as u64]);
        let mut samples = sample_class(self.model(class_id)?, n, origin, gap, seed)?;
        for s in &mut samples {
            s.split = split;
        }
        Ok(samples)
    }
}

/// Draw the target and distractor class models. Means are iid
/// `N(0, (separation / sqrt(d))^2)` per coordinate, gap directions are
/// normalized Gaussian vectors.
pub fn build_world(config: &WorldConfig) -> Result<Vec<GaussianClassModel>> {
    config.validate()?;
    let d = config.dim;
    let coord_sd = config.separation / (d as f64).sqrt();
    let total = config.num_classes + config.num_distractors;
    let root = SplitMix64::new(config.seed);
    let mut mean_rng = root.fork(STREAM_MEANS);
    let mut gap_rng = root.fork(STREAM_GAP);
    let mut axis_rng = root.fork(STREAM_AXES);

    let mut classes = Vec::with_capacity(total);
    for c in 0..total {
        let mean: Vec<f64> = (0..d).map(|_| coord_sd * mean_rng.normal()).collect();
        let gap_direction = unit_vector(&mut gap_rng, d);
        let axis_scales = (config.anisotropy > 0.0)
            .then(|| (0..d).map(|_| (config.anisotropy * axis_rng.normal()).exp()).collect());
        classes.push(GaussianClassModel {
            class_id: c as ClassId,
            mean,
            intra_sd: config.intra_sd,
            gap_direction,
            axis_scales,
        });
    }
    Ok(classes)
}

fn unit_vector(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draw `n` samples from a class model. Real samples follow
/// `N(mean, intra_sd^2 I)`; synthetic ones `N(mean + delta * gap_direction,
/// (diversity_scale * intra_sd)^2 I)`. Samples are tagged `Train`.
pub fn sample_class(
    model: &GaussianClassModel,
    n: usize,
    origin: Origin,
    gap: GapParams,
    seed: u64,
) -> Result<Vec<EmbeddingSample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let (shift, sd) = match origin {
        Origin::Real => (0.0, model.intra_sd),
        Origin::Synthetic => (gap.delta, gap.diversity_scale * model.intra_sd),
    };
    let center: Vec<f64> = model
        .mean
        .iter()
        .zip(&model.gap_direction)
        .map(|(m, g)| m + shift * g)
        .collect();
    let mut rng = SplitMix64::new(seed);
    let samples = (0..n)
        .map(|_| {
            let features = center
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let axis = model.axis_scales.as_ref().map_or(1.0, |a| a[i]);
                    c + sd * axis * rng.normal()
                })
                .collect();
            EmbeddingSample::new(features, model.class_id, origin, Split::Train)
        })
        .collect();
    Ok(samples)
}

/// Choose the auxiliary classes trained alongside the initial step.
///
/// * `none`: empty.
/// * `oracle`: every future class.
/// * `partial(k)`: `floor(k * |future| / 100)` true future classes plus
///   distractors up to `|future|` classes in total.
/// * `explicit`: the listed classes.
pub fn compose_auxiliary(
    schedule: &IncrementalSchedule,
    spec: &AuxiliarySpec,
    distractor_pool: &[ClassId],
    seed: u64,
) -> Result<Vec<ClassId>> {
    spec.validate(schedule.initial())?;
    let future = schedule.future();
    let mut rng = SplitMix64::new(seed);
    match &spec.mode {
        AuxMode::None => Ok(Vec::new()),
        AuxMode::Oracle => Ok(future),
        AuxMode::Partial { k } => {
            let correct = (*k as usize * future.len()) / 100;
            let wrong = future.len() - correct;
            let pool: Vec<ClassId> = if spec.distractor_pool.is_empty() {
                distractor_pool.to_vec()
            } else {
                spec.distractor_pool.clone()
            };
            let future_set: BTreeSet<ClassId> = future.iter().copied().collect();
            if let Some(c) = pool.iter().find(|c| future_set.contains(c) || schedule.initial().contains(c)) {
                return Err(Error::Composition(format!(
                    "distractor class {c} belongs to the target catalog"
                )));
            }
            if pool.len() < wrong {
                return Err(Error::Composition(format!(
                    "partial({k}) needs {wrong} distractor classes but the pool has {}",
                    pool.len()
                )));
            }
            let mut chosen = rng.sample_without_replacement(&future, correct);
            chosen.extend(rng.sample_without_replacement(&pool, wrong));
            Ok(chosen)
        }
        AuxMode::Explicit { classes } => Ok(classes.clone()),
    }
}

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = COEF[1..]
        .iter()
        .enumerate()
        .fold(COEF[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{build_schedule, ClassCatalog};

    fn small_config(seed: u64) -> WorldConfig {
        WorldConfig {
            num_classes: 3,
            dim: 2,
            separation: 6.0,
            intra_sd: 0.5,
            seed,
            num_distractors: 0,
            anisotropy: 0.0,
        }
    }

    #[test]
    fn world_is_deterministic() {
        assert_eq!(build_world(&small_config(7)).unwrap(), build_world(&small_config(7)).unwrap());
        assert_ne!(build_world(&small_config(7)).unwrap(), build_world(&small_config(8)).unwrap());
    }

    #[test]
    fn zero_separation_collapses_means() {
        let mut cfg = small_config(1);
        cfg.separation = 0.0;
        for m in build_world(&cfg).unwrap() {
            assert!(m.mean.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gap_directions_are_unit() {
        let cfg = WorldConfig {
            dim: 17,
            ..WorldConfig::default()
        };
        for m in build_world(&cfg).unwrap() {
            let n: f64 = m.gap_direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_config(0);
        cfg.num_classes = 1;
        assert!(matches!(build_world(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config(0);
        cfg.intra_sd = 0.0;
        assert!(build_world(&cfg).is_err());
        let mut cfg = small_config(0);
        cfg.dim = 1;
        assert!(build_world(&cfg).is_err());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_pairwise_distance_matches_theory() {
        // Monte Carlo over 50 world seeds.
        let mut total = 0.0;
        let mut pairs = 0usize;
        for seed in 0..50 {
            let cfg = WorldConfig {
                num_classes: 10,
                dim: 8,
                separation: 6.0,
                intra_sd: 1.0,
                seed,
                num_distractors: 0,
                anisotropy: 0.0,
            };
            let models = build_world(&cfg).unwrap();
            for i in 0..models.len() {
                for j in i + 1..models.len() {
                    total += crate::data::squared_distance(&models[i].mean, &models[j].mean).sqrt();
                    pairs += 1;
                }
            }
        }
        let empirical = total / pairs as f64;
        let cfg = WorldConfig {
            dim: 8,
            ..WorldConfig::default()
        };
        let theory = cfg.expected_mean_distance();
        assert!(
            (empirical - theory).abs() / theory < 0.15,
            "empirical {empirical} theory {theory}"
        );
    }

    fn model_2d() -> GaussianClassModel {
        build_world(&small_config(3)).unwrap().remove(0)
    }

    #[test]
    fn identical_gap_matches_real_mean() {
        let m = model_2d();
        let n = 10_000;
        let s = sample_class(&m, n, Origin::Synthetic, GapParams::NONE, 99).unwrap();
        let (mean, _) = crate::data::mean_of(s.iter().map(|x| x.features.as_slice()), 2);
        let tol = 5.0 * m.intra_sd / (n as f64).sqrt();
        for (a, b) in mean.iter().zip(&m.mean) {
            assert!((a - b).abs() < tol);
        }
        assert!(s.iter().all(|x| x.origin == Origin::Synthetic));
    }

    #[test]
    fn gap_shift_has_requested_norm() {
        let m = model_2d();
        let gap = GapParams {
            delta: 3.0,
            diversity_scale: 1.0,
        };
        let real = sample_class(&m, 10_000, Origin::Real, gap, 1).unwrap();
        let syn = sample_class(&m, 10_000, Origin::Synthetic, gap, 2).unwrap();
        let (mr, _) = crate::data::mean_of(real.iter().map(|x| x.features.as_slice()), 2);
        let (ms, _) = crate::data::mean_of(syn.iter().map(|x| x.features.as_slice()), 2);
        let shift = crate::data::squared_distance(&mr, &ms).sqrt();
        assert!((shift - 3.0).abs() < 0.1, "shift {shift}");
    }

    #[test]
    fn sampling_is_bit_reproducible() {
        let m = model_2d();
        let a = sample_class(&m, 50, Origin::Real, GapParams::NONE, 5).unwrap();
        let b = sample_class(&m, 50, Origin::Real, GapParams::NONE, 5).unwrap();
        let bits = |v: &[EmbeddingSample]| -> Vec<u64> {
            v.iter().flat_map(|s| s.features.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert!(sample_class(&m, 0, Origin::Real, GapParams::NONE, 5).is_err());
    }

    fn b0_inc10() -> IncrementalSchedule {
        build_schedule(&ClassCatalog::synthetic(100), 0, 10, 3).unwrap()
    }

    fn spec(mode: AuxMode) -> AuxiliarySpec {
        AuxiliarySpec {
            mode,
            ..AuxiliarySpec::default()
        }
    }

    #[test]
    fn oracle_is_exact_future() {
        let s = b0_inc10();
        let pool: Vec<ClassId> = (100..200).collect();
        let ys = compose_auxiliary(&s, &spec(AuxMode::Oracle), &pool, 1).unwrap();
        assert_eq!(ys.len(), 90);
        let future: BTreeSet<_> = s.future().into_iter().collect();
        assert!(ys.iter().all(|c| future.contains(c)));
    }

    #[test]
    fn partial_counts() {
        let s = b0_inc10();
        let pool: Vec<ClassId> = (100..200).collect();
        let future: BTreeSet<_> = s.future().into_iter().collect();
        for (k, expect) in [(50, 45), (0, 0), (33, 29), (66, 59), (100, 90)] {
            let ys = compose_auxiliary(&s, &spec(AuxMode::Partial { k }), &pool, 4).unwrap();
            assert_eq!(ys.len(), 90);
            let overlap = ys.iter().filter(|c| future.contains(c)).count();
            assert_eq!(overlap, expect, "k = {k}");
            let distinct: BTreeSet<_> = ys.iter().collect();
            assert_eq!(distinct.len(), 90);
        }
    }

    #[test]
    fn small_pool_names_required_count() {
        let s = b0_inc10();
        let pool: Vec<ClassId> = (100..110).collect();
        let err = compose_auxiliary(&s, &spec(AuxMode::Partial { k: 50 }), &pool, 0).unwrap_err();
        assert!(matches!(err, Error::Composition(_)));
        assert!(err.to_string().contains("45"));
    }

    #[test]
    fn explicit_must_avoid_initial_step() {
        let s = b0_inc10();
        let bad = spec(AuxMode::Explicit {
            classes: vec![s.initial()[0]],
        });
        assert!(compose_auxiliary(&s, &bad, &[], 0).is_err());
        assert!(compose_auxiliary(&s, &spec(AuxMode::Partial { k: 101 }), &[], 0).is_err());
    }
}
