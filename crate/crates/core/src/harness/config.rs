//! Run configuration: one TOML file with a section per concern, plus
//! environment overrides.
//!
//! An environment variable `KOLMO_<SECTION>__<KEY>` replaces `key` in
//! `[section]` (names are lower-cased; a nested table takes one more
//! `__`). `KOLMO_SEED` and `KOLMO_OUT` set the top-level keys. Values are
//! parsed as TOML scalars, falling back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::TrainConfig;
use crate::odeint::Method;
use crate::simulate::TrueHazardSpec;

pub const ENV_PREFIX: &str = "KOLMO_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data splits, network initialization and simulation.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub simulate: SimulateSection,
    pub train: TrainConfig,
    pub fit: FitSection,
    pub solver: Method,
    pub variational: VariationalSection,
    pub grid: GridSpec,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataSection::default(),
            simulate: SimulateSection::default(),
            train: TrainConfig::default(),
            fit: FitSection::default(),
            solver: Method::default(),
            variational: VariationalSection::default(),
            grid: GridSpec::default(),
            predict: PredictSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub events: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub topology: Option<PathBuf>,
    /// `subject_id,split` manifest; a seeded 64/16/20 split when absent.
    pub splits: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub preset: Option<String>,
    /// A full specification; takes precedence over `preset`.
    pub spec: Option<TrueHazardSpec>,
    pub n_subjects: Option<usize>,
    /// Overrides the censoring of the preset with a target fraction.
    pub censoring_fraction: Option<f64>,
    /// Points of the uniform ground-truth grid on `[0, horizon]`.
    pub truth_points: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            preset: None,
            spec: None,
            n_subjects: None,
            censoring_fraction: None,
            truth_points: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Checkpoint directory to continue training from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalSection {
    pub beta: f64,
    pub n_samples: usize,
    pub level: f64,
    /// k for the latent k-means.
    pub clusters: usize,
}

impl Default for VariationalSection {
    fn default() -> Self {
        VariationalSection {
            beta: 1.0,
            n_samples: 200,
            level: 0.95,
            clusters: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Quantiles of the event times of the evaluated split.
    Quantile,
    Uniform,
    /// The times of the ground-truth file.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Defaults to `ground_truth` when a ground-truth file is configured
    /// and `quantile` otherwise.
    pub rule: Option<GridKind>,
    pub points: usize,
    /// Uniform-grid bounds; `end` defaults to the largest observed time.
    pub start: f64,
    pub end: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rule: None,
            points: 100,
            start: 0.0,
            end: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    pub split: SplitName,
    /// Also write hazard-rate trajectories.
    pub hazards: bool,
    /// Name of a binary covariate; writes the rate ratio of setting it to 1
    /// versus 0 for every subject.
    pub hazard_ratio: Option<String>,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            checkpoint: None,
            split: SplitName::Test,
            hazards: false,
            hazard_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Defaults to `<out>/predictions.csv`.
    pub predictions: Option<PathBuf>,
    pub split: SplitName,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            predictions: None,
            split: SplitName::Test,
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `KOLMO_*` overrides from `vars` to a parsed config table.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, value) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
        let top_level = path.len() == 1 && matches!(path[0].as_str(), "seed" | "out");
        if path.len() < 2 && !top_level {
            continue;
        }
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override {name}")));
        }
        let mut cur = &mut *table;
        for key in &path[..path.len() - 1] {
            let entry = cur
                .entry(key.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{name}: `{key}` is not a section")))?;
        }
        cur.insert(path[path.len() - 1].clone(), parse_scalar(&value));
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text with the given overrides; unknown keys are errors.
    pub fn from_toml_with<I>(text: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        apply_env_overrides(&mut table, vars)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file, applying overrides from the process
    /// environment, and checks that referenced input files exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_with(&text, std::env::vars())?;
        cfg.check_inputs()?;
        Ok(cfg)
    }

    /// Defaults plus process-environment overrides, for runs without a
    /// config file.
    pub fn from_env() -> Result<Self> {
        Self::from_toml_with("", std::env::vars())
    }

    pub fn check_inputs(&self) -> Result<()> {
        let d = &self.data;
        let inputs = [
            &d.events,
            &d.covariates,
            &d.topology,
            &d.splits,
            &d.ground_truth,
            &self.fit.resume,
        ];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
