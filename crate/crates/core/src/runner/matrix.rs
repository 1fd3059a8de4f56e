use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{apply_overrides, parse_literal, set_path, ScenarioConfig};
use super::{prepare_initial_step, run_incremental, write_run_report, PreparedInitialStep};
use crate::error::{Error, Result};
use crate::protocol::RunReport;

/// A set of scenarios compared on the same worlds, schedules and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrix {
    pub name: String,
    pub scenarios: Vec<ScenarioConfig>,
    /// Names of the scenarios improvements are measured against.
    pub baselines: BTreeSet<String>,
}

/// One matrix entry in the file form: a name plus `"dotted.key" = value`
/// overrides of the base scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixVariant {
    pub name: String,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    name: String,
    base: toml::Table,
    #[serde(rename = "variant")]
    variants: Vec<MatrixVariant>,
}

impl ExperimentMatrix {
    /// Parse the file form:
    ///
    /// ```toml
    /// name = "heads"
    /// [base]          # a full scenario
    /// ...
    /// [[variant]]
    /// name = "ncm-baseline"
    /// baseline = true
    /// set = { "head.kind" = "ncm", "auxiliary.mode" = { kind = "none" } }
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Like [`Self::from_toml`], with `key=value` overrides applied to the
    /// base scenario before the variants.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut file: MatrixFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut file.base, overrides)?;
        Self::from_parts(file.name, &file.base, &file.variants)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn from_parts(name: String, base: &toml::Table, variants: &[MatrixVariant]) -> Result<Self> {
        let mut scenarios = Vec::with_capacity(variants.len());
        let mut baselines = BTreeSet::new();
        for v in variants {
            let mut table = base.clone();
            for (key, value) in &v.set {
                set_path(&mut table, key, value.clone())?;
            }
            set_path(&mut table, "name", parse_literal(&format!("{:?}", v.name)))?;
            let cfg: ScenarioConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("variant {:?}: {e}", v.name)))?;
            if v.baseline {
                baselines.insert(v.name.clone());
            }
            scenarios.push(cfg);
        }
        let matrix = Self {
            name,
            scenarios,
            baselines,
        };
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .scenarios
            .first()
            .ok_or_else(|| Error::Matrix("the matrix has no scenarios".into()))?;
        if self.scenarios.len() < 2 {
            return Err(Error::Matrix("a matrix needs at least two scenarios".into()));
        }
        let mut names = BTreeSet::new();
        for s in &self.scenarios {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::Matrix(format!("scenario name {:?} appears twice", s.name)));
            }
            let mismatch = if s.world != first.world {
                Some("world")
            } else if s.schedule != first.schedule {
                Some("schedule")
            } else if s.eval_seeds != first.eval_seeds {
                Some("eval_seeds")
            } else if s.data != first.data {
                Some("data")
            } else {
                None
            };
            if let Some(field) = mismatch {
                return Err(Error::Matrix(format!(
                    "scenario {:?} does not share the {field} settings of {:?}",
                    s.name, first.name
                )));
            }
        }
        if let Some(b) = self.baselines.iter().find(|b| !names.contains(b.as_str())) {
            return Err(Error::Matrix(format!("baseline {b:?} is not a scenario of the matrix")));
        }
        Ok(())
    }

    pub fn eval_seeds(&self) -> &[u64] {
        &self.scenarios[0].eval_seeds
    }

    /// The baseline a scenario is compared with: the only baseline, or the
    /// one using the same head.
    pub fn baseline_for(&self, scenario: &ScenarioConfig) -> Option<&ScenarioConfig> {
        let bases: Vec<&ScenarioConfig> = self
            .scenarios
            .iter()
            .filter(|s| self.baselines.contains(&s.name))
            .collect();
        if bases.len() == 1 {
            return Some(bases[0]);
        }
        let same_head: Vec<&ScenarioConfig> = bases.into_iter().filter(|b| b.head.kind == scenario.head.kind).collect();
        (same_head.len() == 1).then(|| same_head[0])
    }
}

/// Prepared initial steps keyed by their initial-step digest, so heads that
/// share an extractor train it once.
#[derive(Debug, Default)]
pub struct InitialStepCache {
    entries: HashMap<String, PreparedInitialStep>,
}

impl InitialStepCache {
    pub fn get_or_prepare(&mut self, config: &ScenarioConfig, seed: u64) -> Result<&PreparedInitialStep> {
        let key = config.initial_step_digest(seed);
        if !self.entries.contains_key(&key) {
            let prepared = prepare_initial_step(config, seed)?;
            self.entries.insert(key.clone(), prepared);
        }
        Ok(&self.entries[&key])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub head: String,
    pub auxiliary: String,
    pub aia_mean: f64,
    pub aia_sd: f64,
    pub last_mean: f64,
    pub last_sd: f64,
    pub reports: Vec<RunReport>,
}

impl ScenarioSummary {
    pub fn aia_per_seed(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.average_incremental_accuracy).collect()
    }

    pub fn last_per_seed(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.last_accuracy).collect()
    }
}

/// Paired per-seed differences to a baseline, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub scenario: String,
    pub baseline: String,
    pub aia_pp_mean: f64,
    pub aia_pp_sd: f64,
    pub last_pp_mean: f64,
    pub last_pp_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub name: String,
    pub summaries: Vec<ScenarioSummary>,
    pub improvements: Vec<Improvement>,
}

impl MatrixResult {
    pub fn summary(&self, name: &str) -> Option<&ScenarioSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn improvement(&self, name: &str) -> Option<&Improvement> {
        self.improvements.iter().find(|i| i.scenario == name)
    }

    /// Plain-text table, accuracies in percent.
    pub fn render_table(&self) -> String {
        let width = self.summaries.iter().map(|s| s.name.len()).max().unwrap_or(8).max(8);
        let mut out = String::new();
        writeln!(out, "{:width$}  {:6}  {:12}  {:>15}  {:>15}", "scenario", "head", "auxiliary", "AIA", "last").unwrap();
        for s in &self.summaries {
            writeln!(
                out,
                "{:width$}  {:6}  {:12}  {:>7.2} ± {:5.2}  {:>7.2} ± {:5.2}",
                s.name,
                s.head,
                s.auxiliary,
                100.0 * s.aia_mean,
                100.0 * s.aia_sd,
                100.0 * s.last_mean,
                100.0 * s.last_sd
            )
            .unwrap();
        }
        for i in &self.improvements {
            writeln!(
                out,
                "{:width$}  vs {}: AIA {:+.2} ± {:.2} p.p., last {:+.2} ± {:.2} p.p.",
                i.scenario, i.baseline, i.aia_pp_mean, i.aia_pp_sd, i.last_pp_mean, i.last_pp_sd
            )
            .unwrap();
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("scenario,head,auxiliary,aia_mean,aia_sd,last_mean,last_sd,baseline,aia_pp,last_pp\n");
        for s in &self.summaries {
            let imp = self.improvement(&s.name);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.name,
                s.head,
                s.auxiliary,
                s.aia_mean,
                s.aia_sd,
                s.last_mean,
                s.last_sd,
                imp.map_or("", |i| i.baseline.as_str()),
                imp.map_or(String::new(), |i| i.aia_pp_mean.to_string()),
                imp.map_or(String::new(), |i| i.last_pp_mean.to_string()),
            )
            .unwrap();
        }
        out
    }

    /// Write `matrix.json`, `matrix.csv` and every per-run report under
    /// `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.summaries {
            for r in &s.reports {
                write_run_report(dir, r)?;
            }
        }
        let json = dir.join("matrix.json");
        fs::write(&json, serde_json::to_string_pretty(self).expect("result serializes") + "\n")
            .map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("matrix.csv");
        fs::write(&csv, self.render_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(dir.to_path_buf())
    }
}

/// Mean and sample standard deviation (`n - 1`; zero for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Run every scenario under every evaluation seed. Seeds form the outer
/// loop so the cache holds one seed's extractors at a time.
pub fn run_matrix(matrix: &ExperimentMatrix) -> Result<MatrixResult> {
    matrix.validate()?;
    let mut reports: Vec<Vec<RunReport>> = vec![Vec::new(); matrix.scenarios.len()];
    let mut cache = InitialStepCache::default();
    for &seed in matrix.eval_seeds() {
        cache.clear();
        for (i, cfg) in matrix.scenarios.iter().enumerate() {
            let prepared = cache.get_or_prepare(cfg, seed)?;
            let outcome = run_incremental(cfg, prepared)?;
            log::info!(
                "{} seed {seed}: AIA {:.4}, last {:.4}",
                cfg.name,
                outcome.report.average_incremental_accuracy,
                outcome.report.last_accuracy
            );
            reports[i].push(outcome.report);
        }
    }

    let summaries: Vec<ScenarioSummary> = matrix
        .scenarios
        .iter()
        .zip(reports)
        .map(|(cfg, reports)| {
            let aia: Vec<f64> = reports.iter().map(|r| r.average_incremental_accuracy).collect();
            let last: Vec<f64> = reports.iter().map(|r| r.last_accuracy).collect();
            let (aia_mean, aia_sd) = mean_sd(&aia);
            let (last_mean, last_sd) = mean_sd(&last);
            ScenarioSummary {
                name: cfg.name.clone(),
                head: cfg.head.kind.label().to_string(),
                auxiliary: cfg.auxiliary.mode.label(),
                aia_mean,
                aia_sd,
                last_mean,
                last_sd,
                reports,
            }
        })
        .collect();

    let mut improvements = Vec::new();
    for (cfg, summary) in matrix.scenarios.iter().zip(&summaries) {
        if matrix.baselines.contains(&cfg.name) {
            continue;
        }
        let Some(base_cfg) = matrix.baseline_for(cfg) else {
            continue;
        };
        let base = summaries.iter().find(|s| s.name == base_cfg.name).expect("baseline summary");
        for (a, b) in summary.reports.iter().zip(&base.reports) {
            if a.seed != b.seed {
                return Err(Error::Matrix(format!(
                    "{} and {} were not run on the same seeds",
                    summary.name, base.name
                )));
            }
        }
        let diff = |f: fn(&RunReport) -> f64| -> Vec<f64> {
            summary.reports.iter().zip(&base.reports).map(|(a, b)| 100.0 * (f(a) - f(b))).collect()
        };
        let (aia_pp_mean, aia_pp_sd) = mean_sd(&diff(|r| r.average_incremental_accuracy));
        let (last_pp_mean, last_pp_sd) = mean_sd(&diff(|r| r.last_accuracy));
        improvements.push(Improvement {
            scenario: summary.name.clone(),
            baseline: base.name.clone(),
            aia_pp_mean,
            aia_pp_sd,
            last_pp_mean,
            last_pp_sd,
        });
    }

    Ok(MatrixResult {
        name: matrix.name.clone(),
        summaries,
        improvements,
    })
}
