//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vaxopt_core::adjoint::ObjectiveKind;
use vaxopt_core::analysis::{ScanAxis, ScenarioSpec, SCAN_WEEKS};
use vaxopt_core::calibration::{ChainConfig, LeastSquaresConfig, Priors};
use vaxopt_core::optimizer::PgdConfig;
use vaxopt_core::{AgeAxis, ModelParams, PiecewiseConstant};

use crate::error::{IoError, Result};

/// Where model parameters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// Reference five-class parameters plus the inputs they lack.
    Reference {
        populations: [f64; 5],
        contact: Vec<Vec<f64>>,
        beta: Vec<f64>,
        #[serde(default = "week")]
        phase_days: f64,
        hosp_fraction: f64,
        hosp_propensity: Vec<f64>,
    },
    Inline {
        params: ModelParams,
    },
    /// JSON-encoded parameters.
    File {
        path: PathBuf,
    },
}

fn week() -> f64 {
    7.0
}

impl ModelSource {
    pub fn load(&self) -> Result<ModelParams> {
        let params = match self {
            ModelSource::Reference {
                populations,
                contact,
                beta,
                phase_days,
                hosp_fraction,
                hosp_propensity,
            } => ModelParams::reference(
                AgeAxis::standard(*populations)?,
                contact.clone(),
                PiecewiseConstant {
                    phase_days: *phase_days,
                    values: beta.clone(),
                },
                *hosp_fraction,
                hosp_propensity.clone(),
            )?,
            ModelSource::Inline { params } => params.clone(),
            ModelSource::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
                serde_json::from_str(&text)?
            }
        };
        params.validate()?;
        Ok(params)
    }
}

/// Initial state at day 0; missing entries are taken from the
/// epidemiological file's first day when one is configured, else zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default)]
    pub infected: Option<Vec<f64>>,
    #[serde(default)]
    pub recovered: Option<Vec<f64>>,
    #[serde(default)]
    pub deceased: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    #[serde(default)]
    pub epi: Option<PathBuf>,
    #[serde(default)]
    pub vaccination: Option<PathBuf>,
    /// Calendar date of day 0; needed to align vaccination weeks.
    #[serde(default)]
    pub start_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    /// Days between first and second dose.
    pub delta_w: u32,
    /// Administration capacity in doses/week.
    #[serde(default)]
    pub capacity: Option<f64>,
}

/// Deceased data generated from the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTruth {
    pub beta: Vec<f64>,
    /// Noise standard deviation relative to each class's final deceased.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Length of the calibration window from day 0.
    pub days: u32,
    pub n_phases: usize,
    #[serde(default = "week")]
    pub phase_days: f64,
    #[serde(default)]
    pub fit_recovery: bool,
    #[serde(default)]
    pub fit_initial: bool,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub least_squares: LeastSquaresConfig,
    #[serde(default)]
    pub synthetic: Option<SyntheticTruth>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "scan_weeks")]
    pub scan_weeks: Vec<usize>,
    #[serde(default = "scan_resolution")]
    pub scan_resolution: usize,
    #[serde(default = "scan_axes")]
    pub scan_axes: Vec<ScanAxis>,
}

fn scan_weeks() -> Vec<usize> {
    SCAN_WEEKS.to_vec()
}

fn scan_resolution() -> usize {
    11
}

fn scan_axes() -> Vec<ScanAxis> {
    vec![ScanAxis::Sigma, ScanAxis::Theta]
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            scan_weeks: scan_weeks(),
            scan_resolution: scan_resolution(),
            scan_axes: scan_axes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub objective: ObjectiveKind,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Days simulated from day 0 before the optimization window opens.
    #[serde(default)]
    pub warmup_days: u32,
    #[serde(default = "yes")]
    pub optimize: bool,
    pub model: ModelSource,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub data: DataFiles,
    pub scenario: ScenarioSpec,
    pub policy: PolicySpec,
    #[serde(default)]
    pub pgd: PgdConfig,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.epi.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.vaccination.as_mut() {
            fix(p);
        }
        if let ModelSource::File { path } = &mut self.model {
            fix(path);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| IoError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pgd.validate()?;
        if self.policy.delta_w == 0 || self.policy.delta_w % 7 != 0 {
            return Err(IoError::Config(format!(
                "policy.delta_w must be a positive multiple of 7, got {}",
                self.policy.delta_w
            )));
        }
        if self.warmup_days % 7 != 0 {
            return Err(IoError::Config(format!(
                "warmup_days must be whole weeks, got {}",
                self.warmup_days
            )));
        }
        if let Some(c) = &self.calibration {
            if c.enabled && c.synthetic.is_none() && self.data.epi.is_none() {
                return Err(IoError::Config(
                    "calibration needs data.epi or a synthetic truth".into(),
                ));
            }
            if let Some(s) = &c.synthetic {
                if s.beta.len() != c.n_phases {
                    return Err(IoError::Config(format!(
                        "synthetic truth has {} phases, calibration expects {}",
                        s.beta.len(),
                        c.n_phases
                    )));
                }
            }
        }
        if self.diagnostics.scan_resolution < 2 {
            return Err(IoError::Config("diagnostics.scan_resolution must be at least 2".into()));
        }
        Ok(())
    }

    /// Copy with the output directory removed; the part of the config that
    /// determines the results.
    pub fn canonical(&self) -> RunConfig {
        RunConfig {
            output_dir: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Short identifier derived from [`Self::hash`].
    pub fn id(&self) -> String {
        self.hash()[..16].to_string()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r#"
name = "small"
seed = 7
objective = "deceased"
warmup_days = 7

[model]
kind = "reference"
populations = [1.0e6, 1.2e6, 1.3e6, 1.1e6, 4.0e5]
contact = [[3.0, 1.0, 0.8, 0.4, 0.2], [1.0, 2.5, 1.2, 0.5, 0.2], [0.8, 1.2, 2.0, 0.7, 0.3], [0.4, 0.5, 0.7, 1.5, 0.5], [0.2, 0.2, 0.3, 0.5, 1.0]]
beta = [0.02, 0.02, 0.02, 0.02, 0.02, 0.02]
hosp_fraction = 0.1
hosp_propensity = [0.01, 0.03, 0.08, 0.2, 0.4]

[initial]
infected = [2000.0, 3000.0, 3000.0, 1500.0, 500.0]

[scenario]
ig_kind = "homogeneous"
horizon_days = 28
budget = { mode = "constant", per_week = 70000.0 }

[policy]
delta_w = 21
"#;

    #[test]
    fn parses_and_hashes() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(cfg.objective, ObjectiveKind::Deceased);
        assert_eq!(cfg.pgd, PgdConfig::default());
        assert!(cfg.optimize);
        let mut other = cfg.clone();
        other.output_dir = Some("elsewhere".into());
        assert_eq!(cfg.hash(), other.hash());
        other.seed = 8;
        assert_ne!(cfg.hash(), other.hash());
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_delay_and_unknown_keys() {
        let bad = SMALL.replace("delta_w = 21", "delta_w = 10");
        assert!(RunConfig::from_toml_str(&bad).is_err());
        let bad = SMALL.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }
}
