//! Run artifacts: in-memory record of a pipeline run and its on-disk form,
//! a directory of JSON and CSV files listed with their SHA-256 digests in
//! `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vaxopt_core::analysis::{ScanSurface, VariationReport};
use vaxopt_core::calibration::{Candidate, LeastSquaresResult, ParameterSummary};
use vaxopt_core::dynamics::hospitalized;
use vaxopt_core::optimizer::OptimizationTrace;
use vaxopt_core::{Compartment, DosingPolicy, EpiState, ModelParams, Trajectory};

use crate::config::RunConfig;
use crate::error::{IoError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub least_squares: LeastSquaresResult,
    pub summaries: Vec<ParameterSummary>,
    pub acceptance_rate: f64,
    pub acceptance_warning: bool,
    pub noise_scale: f64,
    /// Posterior medians, used downstream.
    pub fitted: Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionSeries {
    pub weeks: Vec<usize>,
    pub baseline: Vec<f64>,
    pub optimal: Option<Vec<f64>>,
}

/// Everything a pipeline run produced. Stages that did not run leave their
/// fields empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: RunConfig,
    pub config_hash: String,
    pub stages_completed: Vec<String>,
    pub failure: Option<StageFailure>,
    pub warnings: Vec<String>,
    pub params: Option<ModelParams>,
    pub initial_state: Option<EpiState>,
    pub calibration: Option<CalibrationOutcome>,
    pub initial_policy: Option<DosingPolicy>,
    pub optimal_policy: Option<DosingPolicy>,
    pub baseline: Option<Trajectory>,
    pub optimal: Option<Trajectory>,
    pub trace: Option<OptimizationTrace>,
    pub variation: Option<VariationReport>,
    pub scans: Vec<ScanSurface>,
    pub reproduction: Option<ReproductionSeries>,
}

impl RunArtifact {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            config: config.canonical(),
            config_hash: config.hash(),
            stages_completed: Vec::new(),
            failure: None,
            warnings: Vec::new(),
            params: None,
            initial_state: None,
            calibration: None,
            initial_policy: None,
            optimal_policy: None,
            baseline: None,
            optimal: None,
            trace: None,
            variation: None,
            scans: Vec::new(),
            reproduction: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    /// File name to contents.
    pub fn render(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut files = BTreeMap::new();
        let json = |v: &dyn erased::Json| v.to_json();
        files.insert("config.toml".into(), self.config.to_toml_string()?.into_bytes());
        files.insert(
            "status.json".into(),
            json(&Status {
                name: &self.config.name,
                config_hash: &self.config_hash,
                stages_completed: &self.stages_completed,
                failure: &self.failure,
                warnings: &self.warnings,
            })?,
        );
        if let Some(p) = &self.params {
            files.insert("params.json".into(), json(p)?);
        }
        if let Some(x) = &self.initial_state {
            files.insert("initial_state.json".into(), json(x)?);
        }
        if let Some(c) = &self.calibration {
            files.insert("calibration.json".into(), json(c)?);
        }
        for (tag, policy) in [("initial", &self.initial_policy), ("optimal", &self.optimal_policy)] {
            if let Some(p) = policy {
                files.insert(format!("policy_{tag}.json"), json(p)?);
                files.insert(format!("policy_{tag}.csv"), policy_csv(p).into_bytes());
            }
        }
        if let (Some(params), Some(base)) = (&self.params, &self.baseline) {
            let table = TrajectoryTables {
                labels: params.ages.labels().to_vec(),
                baseline: TrajectoryTable::new(base, params)?,
                optimal: self.optimal.as_ref().map(|t| TrajectoryTable::new(t, params)).transpose()?,
            };
            files.insert("trajectories.json".into(), json(&table)?);
            files.insert("trajectory_baseline.csv".into(), trajectory_csv(&table.baseline, &table.labels).into_bytes());
            if let Some(opt) = &table.optimal {
                files.insert("trajectory_optimal.csv".into(), trajectory_csv(opt, &table.labels).into_bytes());
            }
        }
        if let Some(t) = &self.trace {
            files.insert("trace.json".into(), json(t)?);
            files.insert("trace.csv".into(), trace_csv(t).into_bytes());
        }
        if let Some(v) = &self.variation {
            files.insert("variation.json".into(), json(v)?);
            files.insert("variation.csv".into(), variation_csv(v).into_bytes());
        }
        if !self.scans.is_empty() {
            files.insert("scan.json".into(), json(&self.scans)?);
        }
        if let Some(r) = &self.reproduction {
            files.insert("reproduction.json".into(), json(r)?);
        }
        Ok(files)
    }

    /// Digest over every rendered file.
    pub fn content_hash(&self) -> Result<String> {
        Ok(Manifest::from_files(&self.config.name, &self.config_hash, &self.render()?).content_hash)
    }

    /// Writes all files and the manifest into `dir`, which is created if
    /// needed and must not already hold an artifact.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        if dir.join(MANIFEST).exists() {
            return Err(IoError::Config(format!(
                "{} already holds an artifact",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
        let files = self.render()?;
        for (name, bytes) in &files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| IoError::file(&path, e))?;
        }
        let manifest = Manifest::from_files(&self.config.name, &self.config_hash, &files);
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| IoError::file(&path, e))?;
        Ok(manifest)
    }
}

mod erased {
    use serde::Serialize;

    pub trait Json {
        fn to_json(&self) -> crate::Result<Vec<u8>>;
    }

    impl<T: Serialize> Json for T {
        fn to_json(&self) -> crate::Result<Vec<u8>> {
            Ok(serde_json::to_vec_pretty(self)?)
        }
    }
}

#[derive(Serialize)]
struct Status<'a> {
    name: &'a str,
    config_hash: &'a str,
    stages_completed: &'a [String],
    failure: &'a Option<StageFailure>,
    warnings: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub content_hash: String,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn from_files(name: &str, config_hash: &str, files: &BTreeMap<String, Vec<u8>>) -> Self {
        let digests: BTreeMap<String, String> = files
            .iter()
            .map(|(n, b)| (n.clone(), hex::encode(Sha256::digest(b))))
            .collect();
        let mut hasher = Sha256::new();
        for (n, d) in &digests {
            hasher.update(n.as_bytes());
            hasher.update(b"\t");
            hasher.update(d.as_bytes());
            hasher.update(b"\n");
        }
        Self {
            name: name.into(),
            config_hash: config_hash.into(),
            content_hash: hex::encode(hasher.finalize()),
            files: digests,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read(&path).map_err(|e| IoError::file(&path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    /// Recomputes the digests of the files on disk.
    pub fn verify(&self, dir: &Path) -> Result<bool> {
        let mut files = BTreeMap::new();
        for name in self.files.keys() {
            let path = dir.join(name);
            files.insert(name.clone(), std::fs::read(&path).map_err(|e| IoError::file(&path, e))?);
        }
        Ok(Manifest::from_files(&self.name, &self.config_hash, &files) == *self)
    }
}

/// Daily per-age series of one trajectory, `[age][day]` per compartment,
/// plus age-summed infected, hospitalized and deceased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTable {
    pub days: Vec<f64>,
    pub compartments: BTreeMap<String, Vec<Vec<f64>>>,
    pub hospitalized: Vec<Vec<f64>>,
    pub totals: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTables {
    pub labels: Vec<String>,
    pub baseline: TrajectoryTable,
    pub optimal: Option<TrajectoryTable>,
}

impl TrajectoryTable {
    pub fn new(traj: &Trajectory, params: &ModelParams) -> Result<Self> {
        let grid = traj.grid();
        let days: Vec<f64> = (0..=grid.n_days()).map(|d| grid.t0 + d as f64).collect();
        let n = traj.n_ages();
        let mut compartments = BTreeMap::new();
        for c in Compartment::ALL {
            let series: Vec<Vec<f64>> = (0..n).map(|i| traj.daily().map(|x| x.get(i, c)).collect()).collect();
            compartments.insert(c.symbol().to_string(), series);
        }
        let mut hosp = vec![Vec::with_capacity(days.len()); n];
        for t in &days {
            for (i, h) in hosp.iter_mut().enumerate() {
                h.push(hospitalized(i, *t, traj, params)?);
            }
        }
        let sum = |s: &Vec<Vec<f64>>| -> Vec<f64> { (0..days.len()).map(|d| s.iter().map(|a| a[d]).sum()).collect() };
        let mut totals = BTreeMap::new();
        totals.insert("I".to_string(), sum(&compartments["I"]));
        totals.insert("H".to_string(), sum(&hosp));
        totals.insert("D".to_string(), sum(&compartments["D"]));
        Ok(Self {
            days,
            compartments,
            hospitalized: hosp,
            totals,
        })
    }
}

fn trajectory_csv(t: &TrajectoryTable, labels: &[String]) -> String {
    let mut s = String::from("day,age_class,S,I,R,D,V,W,H\n");
    for (d, day) in t.days.iter().enumerate() {
        for (i, label) in labels.iter().enumerate() {
            let _ = write!(s, "{day},{label}");
            for c in Compartment::ALL {
                let _ = write!(s, ",{}", t.compartments[c.symbol()][i][d]);
            }
            let _ = writeln!(s, ",{}", t.hospitalized[i][d]);
        }
    }
    s
}

fn policy_csv(p: &DosingPolicy) -> String {
    let mut s = String::from("age,week,u1,u2,ur,n_week\n");
    for i in 0..p.n_ages() {
        for w in 0..p.n_weeks() {
            let _ = writeln!(s, "{i},{w},{},{},{},{}", p.u1[i][w], p.u2_week(i, w), p.u_r[i][w], p.n_week[w]);
        }
    }
    s
}

fn trace_csv(t: &OptimizationTrace) -> String {
    let mut s = String::from("iteration,cost,step,backtracks,max_residual,min_dose\n");
    let _ = writeln!(s, "0,{},0,0,,", t.initial_cost);
    for r in &t.records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iteration, r.cost, r.step, r.backtracks, r.max_residual, r.min_dose);
    }
    s
}

fn variation_csv(v: &VariationReport) -> String {
    let mut s = String::from("day,lambda_i,lambda_h,lambda_d\n");
    for d in 0..v.len() {
        let _ = writeln!(s, "{d},{},{},{}", v.lambda_i[d], v.lambda_h[d], v.lambda_d[d]);
    }
    s
}
