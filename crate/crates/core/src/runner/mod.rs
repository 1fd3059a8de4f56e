//! Scenario orchestration: build the world and schedule, train and freeze
//! the extractor on the initial-step composition, then walk the incremental
//! steps with the configured head.

mod config;
mod matrix;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use crate::data::{ClassId, EmbeddingSample, Origin, Split};
use crate::error::{Error, Result};
use crate::extractor::{finalize_initial_step, init_extractor, train_initial, LinearHeadWeights, MlpExtractor};
use crate::genbridge::import_extractor;
use crate::heads::{HeadState, StepFeatures};
use crate::protocol::{
    average_incremental_accuracy, build_schedule, evaluate_seen_batch, ClassCatalog, IncrementalSchedule, RunReport,
};
use crate::rng::derive_seed;
use crate::world::{compose_auxiliary, GapParams, World};

pub use config::{apply_overrides, Composition, DataConfig, ExtractorConfig, ScenarioConfig, ScheduleConfig};
pub use matrix::{
    mean_sd, run_matrix, spearman, ExperimentMatrix, Improvement, InitialStepCache, MatrixResult, MatrixVariant,
    ScenarioSummary,
};
pub use report::{read_run_report, render_steps_csv, run_dir, write_run_report};

const PURPOSE_TRAIN: u64 = 11;
const PURPOSE_TEST: u64 = 12;
const PURPOSE_AUX: u64 = 13;
const PURPOSE_INITIAL_SYNTH: u64 = 14;
const STREAM_COMPOSE: u64 = 15;
const STREAM_WORLD: u64 = 16;
const STREAM_ORDER: u64 = 17;
const STREAM_INIT: u64 = 18;
const STREAM_SHUFFLE: u64 = 19;
const STREAM_HEAD: u64 = 20;

/// Hands out each step's training data exactly while that step is open.
/// Opening step `t` drops the data of every earlier step for good.
#[derive(Debug)]
pub struct StepDataGate {
    steps: Vec<Option<Vec<EmbeddingSample>>>,
    current: usize,
}

impl StepDataGate {
    pub fn new(per_step: Vec<Vec<EmbeddingSample>>) -> Self {
        Self {
            steps: per_step.into_iter().map(Some).collect(),
            current: 0,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn current_step(&self) -> usize {
        self.current
    }

    /// Open step `step` (1-based). Steps must be opened in order.
    pub fn begin_step(&mut self, step: usize) -> Result<()> {
        if step != self.current + 1 || step > self.steps.len() {
            return Err(Error::Protocol(format!(
                "cannot open step {step} while step {} is open ({} steps)",
                self.current,
                self.steps.len()
            )));
        }
        for slot in &mut self.steps[..step - 1] {
            *slot = None;
        }
        self.current = step;
        Ok(())
    }

    pub fn train_data(&self, step: usize) -> Result<&[EmbeddingSample]> {
        if step == 0 || step > self.steps.len() {
            return Err(Error::Protocol(format!("step {step} does not exist")));
        }
        if step < self.current {
            return Err(Error::Protocol(format!(
                "training data of step {step} was revoked when step {} opened",
                self.current
            )));
        }
        if step > self.current {
            return Err(Error::Protocol(format!("training data of step {step} is not available yet")));
        }
        self.steps[step - 1]
            .as_deref()
            .ok_or_else(|| Error::Protocol(format!("training data of step {step} was revoked")))
    }
}

/// Everything the incremental phase needs from the initial step. Heads with
/// the same initial-step settings can share one of these.
#[derive(Debug, Clone)]
pub struct PreparedInitialStep {
    pub seed: u64,
    pub world: World,
    pub schedule: IncrementalSchedule,
    pub auxiliary_classes: Vec<ClassId>,
    pub extractor: MlpExtractor,
    pub extractor_digest: String,
    /// The jointly trained classifier restricted to the initial classes;
    /// `None` when the initial classes were not part of joint training.
    pub initial_classifier: Option<LinearHeadWeights>,
    pub initial_loss: Vec<f64>,
    /// Embedded test set over every catalog class.
    pub test_features: Vec<EmbeddingSample>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub head: HeadState,
    /// `HeadState::retained_floats` after each step.
    pub retained_floats: Vec<usize>,
}

fn real_train(world: &World, classes: &[ClassId], n: usize) -> Result<Vec<EmbeddingSample>> {
    let mut out = Vec::with_capacity(classes.len() * n);
    for &c in classes {
        out.extend(world.sample(c, n, Origin::Real, Split::Train, GapParams::NONE, PURPOSE_TRAIN)?);
    }
    Ok(out)
}

fn real_train_per_step(
    world: &World,
    schedule: &IncrementalSchedule,
    n: usize,
) -> Result<Vec<Vec<EmbeddingSample>>> {
    schedule.steps.iter().map(|classes| real_train(world, classes, n)).collect()
}

fn synthetic_samples(world: &World, classes: &[ClassId], n: usize, gap: GapParams, purpose: u64) -> Result<Vec<EmbeddingSample>> {
    let mut out = Vec::with_capacity(classes.len() * n);
    for &c in classes {
        out.extend(world.sample(c, n, Origin::Synthetic, Split::Train, gap, purpose)?);
    }
    Ok(out)
}

fn world_and_schedule(config: &ScenarioConfig, seed: u64) -> Result<(World, IncrementalSchedule)> {
    let mut world_cfg = config.world.clone();
    world_cfg.seed = derive_seed(derive_seed(config.world.seed, STREAM_WORLD), seed);
    let world = World::new(world_cfg)?;
    Ok((world, scenario_schedule(config, seed)?))
}

/// The class order a run of `config` under evaluation seed `seed` uses.
pub fn scenario_schedule(config: &ScenarioConfig, seed: u64) -> Result<IncrementalSchedule> {
    let catalog = ClassCatalog::synthetic(config.world.num_classes);
    let order_seed = derive_seed(derive_seed(config.schedule.order_seed, STREAM_ORDER), seed);
    build_schedule(&catalog, config.schedule.base_size, config.schedule.inc_size, order_seed)
}

/// Train the extractor on the configured initial-step composition and
/// freeze it.
pub fn prepare_initial_step(config: &ScenarioConfig, seed: u64) -> Result<PreparedInitialStep> {
    config.validate()?;
    let (world, schedule) = world_and_schedule(config, seed)?;
    let aux_pool = world.distractor_ids();
    let auxiliary_classes = compose_auxiliary(
        &schedule,
        &config.auxiliary,
        &aux_pool,
        derive_seed(derive_seed(config.world.seed, STREAM_COMPOSE), seed),
    )?;
    let aux = config.auxiliary.n_per_class;
    let gap = config.auxiliary.gap;

    let initial = schedule.initial().to_vec();
    let mut gate = StepDataGate::new(vec![real_train(&world, &initial, config.data.train_per_class)?]);
    gate.begin_step(1)?;

    let mut train: Vec<EmbeddingSample> = match config.initial_composition {
        Composition::RealPlusSynthetic => gate.train_data(1)?.to_vec(),
        Composition::SyntheticOnlyFuture => Vec::new(),
        Composition::AllSynthetic => {
            synthetic_samples(&world, &initial, aux.max(1), gap, PURPOSE_INITIAL_SYNTH)?
        }
    };
    if !auxiliary_classes.is_empty() {
        train.extend(synthetic_samples(&world, &auxiliary_classes, aux, gap, PURPOSE_AUX)?);
    }
    let mut joint_classes: Vec<ClassId> = match config.initial_composition {
        Composition::SyntheticOnlyFuture => Vec::new(),
        _ => initial.clone(),
    };
    joint_classes.extend(&auxiliary_classes);

    let mut extractor = match &config.extractor.warm_start {
        Some(path) => {
            let sidecar = path.with_extension("json");
            let e = import_extractor(path, &sidecar)?;
            if e.layer_dims() != config.layer_dims().as_slice() {
                return Err(Error::Config(format!(
                    "warm-start weights have layer dims {:?}, config expects {:?}",
                    e.layer_dims(),
                    config.layer_dims()
                )));
            }
            e
        }
        None => init_extractor(
            &config.layer_dims(),
            derive_seed(derive_seed(config.extractor.init_seed, STREAM_INIT), seed),
        )?,
    };
    let mut joint = LinearHeadWeights::init(
        &joint_classes,
        extractor.feature_dim(),
        derive_seed(derive_seed(config.extractor.init_seed, STREAM_HEAD), seed),
    )?;
    let mut train_cfg = config.extractor.train.clone();
    train_cfg.shuffle_seed = derive_seed(derive_seed(train_cfg.shuffle_seed, STREAM_SHUFFLE), seed);
    let log = train_initial(&mut extractor, &mut joint, &train, &train_cfg)?;
    drop(train);
    if let Some(bad) = log.epoch_losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::Training(format!("initial-step loss diverged ({bad})")));
    }

    let initial_classifier = match config.initial_composition {
        Composition::SyntheticOnlyFuture => {
            extractor.freeze();
            None
        }
        _ => {
            let restricted = finalize_initial_step(&mut extractor, &joint, &initial)?;
            debug_assert_eq!(restricted.num_classes(), initial.len());
            Some(restricted)
        }
    };
    let extractor_digest = extractor.digest();

    let mut test = Vec::with_capacity(config.world.num_classes * config.data.test_per_class);
    for c in 0..config.world.num_classes as ClassId {
        test.extend(world.sample(c, config.data.test_per_class, Origin::Real, Split::Test, GapParams::NONE, PURPOSE_TEST)?);
    }
    let test_features = extractor.embed_samples(&test)?;

    Ok(PreparedInitialStep {
        seed,
        world,
        schedule,
        auxiliary_classes,
        extractor,
        extractor_digest,
        initial_classifier,
        initial_loss: log.epoch_losses,
        test_features,
    })
}

/// Walk steps `1..=T` with a fresh head on top of a prepared, frozen
/// extractor.
pub fn run_incremental(config: &ScenarioConfig, prepared: &PreparedInitialStep) -> Result<RunOutcome> {
    let schedule = &prepared.schedule;
    let extractor = &prepared.extractor;
    if !extractor.is_frozen() {
        return Err(Error::Protocol("the extractor must be frozen before the incremental phase".into()));
    }
    let mut head_cfg = config.head.clone();
    head_cfg.fetril.train.shuffle_seed =
        derive_seed(derive_seed(head_cfg.fetril.train.shuffle_seed, STREAM_HEAD), prepared.seed);
    let mut head = HeadState::new(head_cfg);
    let mut gate = StepDataGate::new(real_train_per_step(&prepared.world, schedule, config.data.train_per_class)?);

    let mut per_step = Vec::with_capacity(schedule.num_steps());
    let mut retained = Vec::with_capacity(schedule.num_steps());
    for t in 1..=schedule.num_steps() {
        let step_result = (|| -> Result<()> {
            gate.begin_step(t)?;
            let embedded = extractor.embed_samples(gate.train_data(t)?)?;
            let mut features: StepFeatures = BTreeMap::new();
            for s in embedded {
                features.entry(s.class_id).or_default().push(s.features);
            }
            head.update(features)?;
            if extractor.digest() != prepared.extractor_digest {
                return Err(Error::Protocol("extractor weights changed after freezing".into()));
            }
            let seen: BTreeSet<ClassId> = schedule.seen_through(t);
            let acc = evaluate_seen_batch(t, |xs| head.predict_batch(xs), &prepared.test_features, &seen)?;
            per_step.push(acc);
            retained.push(head.retained_floats());
            Ok(())
        })();
        step_result.map_err(|e| e.at_step(t))?;
    }

    let aia = average_incremental_accuracy(&per_step)?;
    let last = per_step.last().map(|s| s.top1).unwrap_or(f64::NAN);
    let future: BTreeSet<ClassId> = schedule.future().into_iter().collect();
    let overlap = prepared.auxiliary_classes.iter().filter(|c| future.contains(c)).count();
    let initial_head_width = prepared
        .initial_classifier
        .as_ref()
        .map_or(schedule.initial().len(), LinearHeadWeights::num_classes);
    let report = RunReport {
        scenario: config.name.clone(),
        protocol: schedule.name(),
        head: head.kind().label().to_string(),
        per_step,
        average_incremental_accuracy: aia,
        last_accuracy: last,
        config_digest: config.digest(),
        seed: prepared.seed,
        extractor_digest: prepared.extractor_digest.clone(),
        initial_head_width,
        auxiliary_classes: prepared.auxiliary_classes.len(),
        auxiliary_overlap: overlap,
    };
    report.check_consistency()?;
    Ok(RunOutcome {
        report,
        head,
        retained_floats: retained,
    })
}

/// One full run of a scenario under evaluation seed `seed`.
pub fn run_fpcil_scenario(config: &ScenarioConfig, seed: u64) -> Result<RunOutcome> {
    let prepared = prepare_initial_step(config, seed)?;
    run_incremental(config, &prepared)
}
