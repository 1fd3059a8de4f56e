//! Class-incremental protocol: catalogs, B-i/Inc-j schedules, seen-class
//! evaluation and the average-incremental-accuracy metric.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, EmbeddingSample};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub class_id: ClassId,
    pub name: String,
    pub definition: String,
}

/// The target dataset's classes. Ids are contiguous from zero and names are
/// unique up to case and surrounding whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    entries: Vec<CatalogEntry>,
}

impl ClassCatalog {
    pub fn new(mut entries: Vec<CatalogEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.class_id);
        for (i, e) in entries.iter().enumerate() {
            if e.class_id as usize != i {
                return Err(Error::Validation(format!(
                    "class ids must be unique and contiguous from 0; position {i} holds id {}",
                    e.class_id
                )));
            }
        }
        let mut names = HashSet::new();
        for e in &entries {
            let key = normalize_name(&e.name);
            if key.is_empty() {
                return Err(Error::Validation(format!("class {} has an empty name", e.class_id)));
            }
            if !names.insert(key) {
                return Err(Error::Validation(format!("duplicate class name {:?}", e.name)));
            }
        }
        Ok(Self { entries })
    }

    /// A catalog of `n` placeholder classes named `class_000`, `class_001`, ...
    pub fn synthetic(n: usize) -> Self {
        let entries = (0..n)
            .map(|i| CatalogEntry {
                class_id: i as ClassId,
                name: format!("class_{i:03}"),
                definition: String::new(),
            })
            .collect();
        Self { entries }
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| CatalogEntry {
                    class_id: i as ClassId,
                    name: n.as_ref().to_string(),
                    definition: String::new(),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, id: ClassId) -> Option<&CatalogEntry> {
        self.entries.get(id as usize)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.iter().map(|e| e.class_id)
    }
}

/// Lowercase and trim, the canonical form used for all name comparisons.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Ordered partition of the catalog into incremental steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalSchedule {
    pub steps: Vec<Vec<ClassId>>,
    pub base_size: usize,
    pub inc_size: usize,
    pub order_seed: u64,
}

impl IncrementalSchedule {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Classes of step `step` (1-based).
    pub fn step(&self, step: usize) -> &[ClassId] {
        &self.steps[step - 1]
    }

    pub fn initial(&self) -> &[ClassId] {
        &self.steps[0]
    }

    /// Classes of steps 2..=T, in schedule order.
    pub fn future(&self) -> Vec<ClassId> {
        self.steps[1..].iter().flatten().copied().collect()
    }

    /// Union of steps 1..=step.
    pub fn seen_through(&self, step: usize) -> BTreeSet<ClassId> {
        self.steps[..step].iter().flatten().copied().collect()
    }

    /// Protocol name such as `B50 Inc5` or `B0 Inc10`.
    pub fn name(&self) -> String {
        format!("B{} Inc{}", self.base_size, self.inc_size)
    }
}

/// Shuffle the catalog with Fisher–Yates under [`SplitMix64`] seeded by
/// `order_seed`, then cut it front to back: one block of `base_size` (when
/// nonzero) followed by blocks of `inc_size`.
pub fn build_schedule(
    catalog: &ClassCatalog,
    base_size: usize,
    inc_size: usize,
    order_seed: u64,
) -> Result<IncrementalSchedule> {
    let n = catalog.len();
    if inc_size == 0 {
        return Err(Error::Config("inc_size must be at least 1".into()));
    }
    if base_size >= n {
        // base = all classes gives a single-step run.
        if base_size != n || n == 0 {
            return Err(Error::Config(format!(
                "base_size {base_size} must be smaller than the catalog size {n}"
            )));
        }
    }
    let remaining = n - base_size;
    if remaining % inc_size != 0 {
        return Err(Error::Config(format!(
            "catalog size {n} minus base_size {base_size} = {remaining} is not divisible by inc_size {inc_size}"
        )));
    }

    let mut order: Vec<ClassId> = catalog.class_ids().collect();
    SplitMix64::new(order_seed).shuffle(&mut order);

    let mut steps = Vec::new();
    let mut rest: &[ClassId] = &order;
    if base_size > 0 {
        let (head, tail) = rest.split_at(base_size);
        steps.push(head.to_vec());
        rest = tail;
    }
    steps.extend(rest.chunks(inc_size).map(<[ClassId]>::to_vec));

    Ok(IncrementalSchedule {
        steps,
        base_size,
        inc_size,
        order_seed,
    })
}

/// Top-1 accuracy after one step, kept as exact counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAccuracy {
    pub step_index: usize,
    pub seen_classes: Vec<ClassId>,
    pub correct: u64,
    pub total: u64,
    pub top1: f64,
}

impl StepAccuracy {
    pub fn from_counts(step_index: usize, seen: &BTreeSet<ClassId>, correct: u64, total: u64) -> Self {
        Self {
            step_index,
            seen_classes: seen.iter().copied().collect(),
            correct,
            total,
            top1: correct as f64 / total as f64,
        }
    }
}

/// Score `predict` on the test samples whose class is in `seen`. Samples of
/// other classes are filtered out before the predictor sees anything, and
/// the predictor gets only the feature vector.
pub fn evaluate_seen<F>(
    step_index: usize,
    mut predict: F,
    test_set: &[EmbeddingSample],
    seen: &BTreeSet<ClassId>,
) -> Result<StepAccuracy>
where
    F: FnMut(&[f64]) -> Result<ClassId>,
{
    let mut correct = 0u64;
    let mut total = 0u64;
    for sample in test_set.iter().filter(|s| seen.contains(&s.class_id)) {
        total += 1;
        if predict(&sample.features)? == sample.class_id {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Evaluation(format!(
            "no test samples for the {} seen classes",
            seen.len()
        )));
    }
    Ok(StepAccuracy::from_counts(step_index, seen, correct, total))
}

/// Batched form of [`evaluate_seen`]: `predict` receives every retained
/// feature vector at once and returns one label per vector.
pub fn evaluate_seen_batch<F>(
    step_index: usize,
    predict: F,
    test_set: &[EmbeddingSample],
    seen: &BTreeSet<ClassId>,
) -> Result<StepAccuracy>
where
    F: FnOnce(&[&[f64]]) -> Result<Vec<ClassId>>,
{
    let kept: Vec<&EmbeddingSample> = test_set.iter().filter(|s| seen.contains(&s.class_id)).collect();
    if kept.is_empty() {
        return Err(Error::Evaluation(format!(
            "no test samples for the {} seen classes",
            seen.len()
        )));
    }
    let features: Vec<&[f64]> = kept.iter().map(|s| s.features.as_slice()).collect();
    let labels = predict(&features)?;
    if labels.len() != kept.len() {
        return Err(Error::Evaluation(format!(
            "predictor returned {} labels for {} samples",
            labels.len(),
            kept.len()
        )));
    }
    let correct = kept.iter().zip(&labels).filter(|(s, l)| s.class_id == **l).count() as u64;
    Ok(StepAccuracy::from_counts(step_index, seen, correct, kept.len() as u64))
}

/// Arithmetic mean of the per-step top-1 accuracies, first step included.
pub fn average_incremental_accuracy(per_step: &[StepAccuracy]) -> Result<f64> {
    if per_step.is_empty() {
        return Err(Error::Metric("no step accuracies to average".into()));
    }
    for (i, s) in per_step.iter().enumerate() {
        if s.step_index != i + 1 {
            return Err(Error::Metric(format!(
                "step indices must run 1..T consecutively; position {i} holds step {}",
                s.step_index
            )));
        }
    }
    Ok(mean(per_step.iter().map(|s| s.top1)))
}

pub(crate) fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Outcome of one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub protocol: String,
    pub head: String,
    pub per_step: Vec<StepAccuracy>,
    pub average_incremental_accuracy: f64,
    pub last_accuracy: f64,
    pub config_digest: String,
    pub seed: u64,
    pub extractor_digest: String,
    pub initial_head_width: usize,
    pub auxiliary_classes: usize,
    pub auxiliary_overlap: usize,
}

impl RunReport {
    /// Recompute the summary metrics from `per_step` and compare.
    pub fn check_consistency(&self) -> Result<()> {
        let aia = average_incremental_accuracy(&self.per_step)?;
        let last = self.per_step.last().map(|s| s.top1).unwrap_or(f64::NAN);
        if aia != self.average_incremental_accuracy || last != self.last_accuracy {
            return Err(Error::Metric(format!(
                "report summary ({}, {}) disagrees with per-step records ({aia}, {last})",
                self.average_incremental_accuracy, self.last_accuracy
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Origin, Split};

    fn acc(step: usize, top1: f64) -> StepAccuracy {
        StepAccuracy {
            step_index: step,
            seen_classes: vec![],
            correct: 0,
            total: 1,
            top1,
        }
    }

    #[test]
    fn cifar_like_schedules() {
        let cat = ClassCatalog::synthetic(100);
        let b50 = build_schedule(&cat, 50, 5, 1993).unwrap();
        let sizes: Vec<usize> = b50.steps.iter().map(Vec::len).collect();
        assert_eq!(sizes, [50, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5]);
        assert_eq!(b50.name(), "B50 Inc5");

        let b0 = build_schedule(&cat, 0, 10, 1993).unwrap();
        assert_eq!(b0.steps.len(), 10);
        assert!(b0.steps.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn small_schedule_is_disjoint_cover() {
        let cat = ClassCatalog::synthetic(10);
        let s = build_schedule(&cat, 0, 5, 0).unwrap();
        assert_eq!(s.steps.len(), 2);
        let all: BTreeSet<_> = s.steps.iter().flatten().copied().collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s.steps[0].len() + s.steps[1].len(), 10);
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let cat = ClassCatalog::synthetic(100);
        let err = build_schedule(&cat, 50, 7, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("50") && msg.contains('7'), "{msg}");
        assert!(build_schedule(&cat, 0, 0, 0).is_err());
        assert!(build_schedule(&cat, 101, 1, 0).is_err());
    }

    #[test]
    fn base_equal_to_catalog_gives_single_step() {
        let cat = ClassCatalog::synthetic(6);
        let s = build_schedule(&cat, 6, 3, 4).unwrap();
        assert_eq!(s.num_steps(), 1);
        assert!(s.future().is_empty());
    }

    #[test]
    fn catalog_rejects_duplicates() {
        assert!(ClassCatalog::from_names(&["Apple", " apple "]).is_err());
        let bad = vec![CatalogEntry {
            class_id: 1,
            name: "a".into(),
            definition: String::new(),
        }];
        assert!(ClassCatalog::new(bad).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(average_incremental_accuracy(&[acc(1, 1.0)]).unwrap(), 1.0);
        assert_eq!(average_incremental_accuracy(&[acc(1, 0.8), acc(2, 0.6)]).unwrap(), 0.7);
        let three = average_incremental_accuracy(&[acc(1, 0.9), acc(2, 0.8), acc(3, 0.7)]).unwrap();
        assert!((three - 0.8).abs() < 1e-15);
        assert!(average_incremental_accuracy(&[]).is_err());
        assert!(average_incremental_accuracy(&[acc(2, 0.5)]).is_err());
    }

    fn toy_test_set() -> Vec<EmbeddingSample> {
        (0..4u32)
            .flat_map(|c| {
                (0..5).map(move |i| EmbeddingSample::new(vec![c as f64, i as f64], c, Origin::Real, Split::Test))
            })
            .collect()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let test = toy_test_set();
        let seen: BTreeSet<ClassId> = (0..4).collect();
        let perfect = evaluate_seen(1, |x| Ok(x[0] as ClassId), &test, &seen).unwrap();
        assert_eq!(perfect.top1, 1.0);
        let constant = evaluate_seen(1, |_| Ok(2), &test, &seen).unwrap();
        assert_eq!(constant.top1, 0.25);
        assert_eq!((constant.correct, constant.total), (5, 20));
    }

    #[test]
    fn unseen_samples_never_reach_predictor() {
        let test = toy_test_set();
        let seen: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let acc = evaluate_seen(
            1,
            |x| {
                assert!(x[0] < 2.0);
                Ok(x[0] as ClassId)
            },
            &test,
            &seen,
        )
        .unwrap();
        assert_eq!(acc.total, 10);
    }

    #[test]
    fn empty_seen_test_set_is_an_error() {
        let seen: BTreeSet<ClassId> = [9].into_iter().collect();
        assert!(matches!(
            evaluate_seen(1, |_| Ok(0), &toy_test_set(), &seen),
            Err(Error::Evaluation(_))
        ));
    }
}
