use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extractor::TrainConfig;
use crate::heads::{HeadConfig, HeadKind};
use crate::world::{AuxMode, AuxiliarySpec, GapParams, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_size: usize,
    pub inc_size: usize,
    pub order_seed: u64,
}

/// Real samples drawn per class of the target catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

/// What the extractor is trained on during the initial step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Composition {
    /// Real initial-step data plus synthetic auxiliary data.
    #[default]
    #[serde(rename = "real+synthetic")]
    RealPlusSynthetic,
    /// Synthetic auxiliary data only (var1).
    #[serde(rename = "synthetic-only-future")]
    SyntheticOnlyFuture,
    /// Synthetic samples of the initial classes plus synthetic auxiliary
    /// data (var2).
    #[serde(rename = "all-synthetic")]
    AllSynthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Defaults to `[d, 4d, 2d]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_dims: Option<Vec<usize>>,
    pub init_seed: u64,
    pub train: TrainConfig,
    /// Start from weights exported with `export_extractor` (the `.fpeb`
    /// file; the sidecar is `<file>.json`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub auxiliary: AuxiliarySpec,
    #[serde(default)]
    pub initial_composition: Composition,
    pub extractor: ExtractorConfig,
    pub head: HeadConfig,
    pub eval_seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ScenarioConfig {
    /// The reference simulation: 100 classes in 64 dimensions (separation 6,
    /// intra sd 1), B0 Inc10, oracle auxiliary data with 500 synthetic
    /// samples per class at gap delta 2 and diversity 1.5, FeTrIL head.
    /// 50 real training and 50 test samples per class, a `[64, 256, 128]`
    /// extractor trained for 5 epochs.
    pub fn reference() -> Self {
        let dim = 64;
        Self {
            name: "reference".into(),
            world: WorldConfig {
                num_classes: 100,
                dim,
                separation: 6.0,
                intra_sd: 1.0,
                seed: 0,
                num_distractors: 100,
                anisotropy: 0.0,
            },
            data: DataConfig {
                train_per_class: 50,
                test_per_class: 50,
            },
            schedule: ScheduleConfig {
                base_size: 0,
                inc_size: 10,
                order_seed: 1993,
            },
            auxiliary: AuxiliarySpec {
                mode: AuxMode::Oracle,
                n_per_class: 500,
                gap: GapParams {
                    delta: 2.0,
                    diversity_scale: 1.5,
                },
                distractor_pool: Vec::new(),
            },
            initial_composition: Composition::RealPlusSynthetic,
            extractor: ExtractorConfig {
                layer_dims: None,
                init_seed: 0,
                train: TrainConfig {
                    epochs: 5,
                    augment_noise_sd: 0.1,
                    ..TrainConfig::default()
                },
                warm_start: None,
            },
            head: HeadConfig::new(HeadKind::Fetril),
            eval_seeds: (0..10).collect(),
            output_dir: default_output_dir(),
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.extractor
            .layer_dims
            .clone()
            .unwrap_or_else(|| vec![self.world.dim, 4 * self.world.dim, 2 * self.world.dim])
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.auxiliary.gap.validate()?;
        self.extractor.train.validate()?;
        self.head.fetril.train.validate()?;
        let dims = self.layer_dims();
        if dims.first() != Some(&self.world.dim) {
            return Err(Error::Config(format!(
                "extractor input dim {:?} does not match world dim {}",
                dims.first(),
                self.world.dim
            )));
        }
        crate::protocol::build_schedule(
            &crate::protocol::ClassCatalog::synthetic(self.world.num_classes),
            self.schedule.base_size,
            self.schedule.inc_size,
            self.schedule.order_seed,
        )?;
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(Error::Config("train_per_class and test_per_class must be positive".into()));
        }
        if self.head.kind == HeadKind::Fecam && self.data.train_per_class < 2 {
            return Err(Error::Config("FeCAM needs at least 2 training samples per class".into()));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval_seeds must not be empty".into()));
        }
        if self.auxiliary.mode != AuxMode::None && self.auxiliary.n_per_class == 0 {
            return Err(Error::Config("auxiliary n_per_class must be positive".into()));
        }
        if self.initial_composition == Composition::SyntheticOnlyFuture && self.auxiliary.mode == AuxMode::None {
            return Err(Error::Config(
                "the synthetic-only-future composition needs an auxiliary set".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the configuration, `output_dir`
    /// excluded.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Digest of everything that influences the initial step (the head
    /// configuration and output location excluded).
    pub fn initial_step_digest(&self, seed: u64) -> String {
        let key = (
            &self.world,
            &self.data,
            &self.schedule,
            &self.auxiliary,
            self.initial_composition,
            &self.extractor,
            seed,
        );
        let json = serde_json::to_string(&key).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Load with `section.field=value` overrides applied.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?
            }
            None => toml::Table::try_from(Self::reference()).expect("reference config serializes"),
        };
        apply_overrides(&mut value, overrides)?;
        toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

impl ScenarioConfig {
    /// A copy with `key=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        apply_overrides(&mut table, overrides)?;
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

/// Apply `a.b.c=value` assignments to a TOML table. Values are parsed as
/// TOML literals (numbers, booleans, arrays, inline tables) and fall back to
/// plain strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
        let value = parse_literal(raw.trim());
        set_path(table, path.trim(), value)?;
    }
    Ok(())
}

pub(crate) fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub(crate) fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let mut cursor = table;
    for key in &keys[..keys.len() - 1] {
        cursor = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {path:?}: {key:?} is not a section")))?;
    }
    cursor.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
