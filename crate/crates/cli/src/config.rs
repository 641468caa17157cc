use std::path::{Path, PathBuf};

use psce_core::{ColumnSchema, Dataset, Method, ModelSpec, Stratum};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_GRID_POINTS: usize = 50;
pub const DEFAULT_BOOTSTRAP_B: usize = 1000;
pub const DEFAULT_SIMULATION_B: usize = 500;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SEED: u64 = 1;

/// Covariate names per working model; `None` uses every covariate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelColumns {
    pub propensity: Option<Vec<String>>,
    pub receipt: Option<Vec<String>>,
    pub outcome: Option<Vec<String>>,
    pub censoring: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityGrid {
    pub xi1: Vec<f64>,
    pub xi0: Vec<f64>,
    pub eta1: Vec<f64>,
    pub eta0: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl Default for SensitivityGrid {
    fn default() -> Self {
        SensitivityGrid {
            xi1: vec![0.0],
            xi0: vec![0.0],
            eta1: vec![1.0],
            eta0: vec![1.0],
            zeta: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    /// `observational` or `randomized`.
    pub design: String,
    pub n: usize,
    pub reps: usize,
    pub scenarios: Vec<usize>,
    pub oracle_draws: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            design: "observational".into(),
            n: 1000,
            reps: 500,
            scenarios: (1..=8).collect(),
            oracle_draws: psce_core::simulation_lab::ORACLE_DRAWS,
        }
    }
}

/// Everything a run needs. Read from a JSON file, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub columns: ColumnSchema,
    pub models: ModelColumns,
    pub grid_points: usize,
    /// Last grid time; defaults to the largest observed event time.
    pub t_max: Option<f64>,
    pub methods: Vec<String>,
    pub strata: Vec<String>,
    /// Defaults to 1000, or 500 for the simulation coverage bootstrap.
    pub bootstrap_b: Option<usize>,
    pub alpha: f64,
    pub sensitivity: SensitivityGrid,
    pub simulation: SimulationSettings,
    pub seed: u64,
    /// Neither field changes results, so neither is recorded in the manifest.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            columns: ColumnSchema::default(),
            models: ModelColumns::default(),
            grid_points: DEFAULT_GRID_POINTS,
            t_max: None,
            methods: Method::ALL.iter().map(|m| m.label().to_string()).collect(),
            strata: Stratum::MONOTONE.iter().map(|g| g.label().to_string()).collect(),
            bootstrap_b: None,
            alpha: DEFAULT_ALPHA,
            sensitivity: SensitivityGrid::default(),
            simulation: SimulationSettings::default(),
            seed: DEFAULT_SEED,
            out_dir: PathBuf::from("psce-out"),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.grid_points == 0 {
            return Err(CliError::Config("grid_points must be positive".into()));
        }
        if let Some(t) = self.t_max {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Config(format!("t_max must be positive, got {t}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(b) = self.bootstrap_b {
            if b == 1 {
                return Err(CliError::Config("bootstrap_b must be 0 or at least 2".into()));
            }
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be positive".into()));
        }
        let s = &self.sensitivity;
        if s.eta1.iter().chain(&s.eta0).any(|&e| !(e > 0.0)) {
            return Err(CliError::Config("curvature parameters eta must be positive".into()));
        }
        if s.zeta.iter().any(|&z| !(z >= 0.0)) {
            return Err(CliError::Config("zeta values must be nonnegative".into()));
        }
        if s.xi1.iter().chain(&s.xi0).any(|x| !x.is_finite()) {
            return Err(CliError::Config("extremum parameters xi must be finite".into()));
        }
        self.methods()?;
        self.strata()?;
        Ok(())
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        self.methods
            .iter()
            .map(|m| Method::parse(m).ok_or_else(|| CliError::Config(format!("unknown method `{m}`"))))
            .collect()
    }

    pub fn strata(&self) -> Result<Vec<Stratum>, CliError> {
        self.strata
            .iter()
            .map(|g| match Stratum::parse(g) {
                Some(Stratum::D) => Err(CliError::Config("defiers are only available through the zeta sweep".into())),
                Some(s) => Ok(s),
                None => Err(CliError::Config(format!("unknown stratum `{g}`"))),
            })
            .collect()
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Config("no input file given (--input or config `input`)".into()))
    }

    /// Resolves model covariate names to dataset column indices.
    pub fn model_spec(&self, ds: &Dataset) -> Result<ModelSpec, CliError> {
        let resolve = |names: &Option<Vec<String>>| -> Result<Vec<usize>, CliError> {
            match names {
                None => Ok((0..ds.n_covariates()).collect()),
                Some(list) => list
                    .iter()
                    .map(|c| {
                        ds.covariate_index(c)
                            .ok_or_else(|| CliError::Config(format!("unknown column `{c}` in model covariates")))
                    })
                    .collect(),
            }
        };
        Ok(ModelSpec {
            propensity: resolve(&self.models.propensity)?,
            receipt: resolve(&self.models.receipt)?,
            outcome: resolve(&self.models.outcome)?,
            censoring: resolve(&self.models.censoring)?,
        })
    }

    /// Time grid ending at `t_max`, or at the last observed event.
    pub fn grid(&self, ds: &Dataset) -> Result<Vec<f64>, CliError> {
        let t_max = match self.t_max {
            Some(t) => t,
            None => ds
                .records()
                .iter()
                .filter(|r| r.delta)
                .map(|r| r.u)
                .fold(f64::NAN, f64::max),
        };
        if !(t_max > 0.0) {
            return Err(CliError::Config("cannot derive t_max: no observed events".into()));
        }
        Ok(psce_core::psce_estimators::default_grid(t_max, self.grid_points))
    }
}
