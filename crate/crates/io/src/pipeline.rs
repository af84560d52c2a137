//! The run pipeline: warm-up, optional calibration, baseline solve,
//! optimization and diagnostics.

use std::path::Path;

use chrono::{Days, NaiveDate};
use vaxopt_core::adjoint::Objective;
use vaxopt_core::analysis::{
    build_initial_guess, extension_preset, reproduction_number, sensitivity_scan, variation_report, weekly_checkpoints,
};
use vaxopt_core::calibration::{
    make_synthetic_truth, CalibrationData, CalibrationProblem, CalibrationSpec, NoiseScale,
};
use vaxopt_core::control::project_feasible;
use vaxopt_core::integrator::{integrate_forward, negative_violation};
use vaxopt_core::optimizer::{pgd_optimize, ControlProblem};
use vaxopt_core::{Compartment, DosingPolicy, EpiState, GridSpec, ModelParams, PiecewiseConstant, Trajectory};

use crate::artifact::{CalibrationOutcome, ReproductionSeries, RunArtifact, StageFailure};
use crate::config::RunConfig;
use crate::error::{IoError, Result};
use crate::ingest::{ingest_epi_data, ingest_vaccination_data, EpiSeries, VaccinationSeries};

pub const STAGES: [&str; 5] = ["warmup", "calibration", "baseline", "optimization", "diagnostics"];

/// State passed between stages.
struct Context {
    params: ModelParams,
    x_start: EpiState,
    /// Administered doses from day 0, absolute weeks.
    administered: DosingPolicy,
    data_budget: Option<Vec<f64>>,
    epi: Option<EpiSeries>,
}

struct Horizon {
    params: ModelParams,
    x0: EpiState,
    grid: GridSpec,
    initial: DosingPolicy,
}

/// Runs every stage in order. A failing stage stops the run and is recorded
/// in the artifact; the artifact is returned either way.
pub fn run_pipeline(cfg: &RunConfig) -> RunArtifact {
    let mut art = RunArtifact::new(cfg);
    if let Err((stage, err)) = run_stages(cfg, &mut art) {
        art.failure = Some(StageFailure {
            stage: stage.into(),
            message: err.to_string(),
        });
    }
    art
}

/// Runs the pipeline and writes the artifact into `dir`.
pub fn run_and_write(cfg: &RunConfig, dir: &Path) -> Result<(RunArtifact, crate::artifact::Manifest)> {
    let art = run_pipeline(cfg);
    let manifest = art.write(dir)?;
    Ok((art, manifest))
}

type StageResult<T> = std::result::Result<T, (&'static str, IoError)>;

fn tag<T>(stage: &'static str, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (stage, e))
}

fn run_stages(cfg: &RunConfig, art: &mut RunArtifact) -> StageResult<()> {
    cfg.validate().map_err(|e| ("warmup", e))?;
    let mut ctx = tag("warmup", warmup(cfg, art))?;
    art.stages_completed.push("warmup".into());

    if cfg.calibration.as_ref().is_some_and(|c| c.enabled) {
        tag("calibration", calibrate(cfg, &mut ctx, art))?;
        art.stages_completed.push("calibration".into());
    }

    let horizon = tag("baseline", baseline(cfg, &ctx, art))?;
    art.stages_completed.push("baseline".into());

    if cfg.optimize {
        tag("optimization", optimize(cfg, &horizon, art))?;
        art.stages_completed.push("optimization".into());
    }

    tag("diagnostics", diagnostics(cfg, &horizon, art))?;
    art.stages_completed.push("diagnostics".into());
    Ok(())
}

fn total_days(cfg: &RunConfig) -> u32 {
    cfg.warmup_days + cfg.scenario.horizon_days + cfg.scenario.extension_days
}

fn weeks_for(days: u32) -> usize {
    (days as usize).div_ceil(7).max(1)
}

/// Per-age rows of a labelled table in the order of `labels`; absent
/// classes are zero.
fn by_label(data_labels: &[String], rows: &[Vec<f64>], labels: &[String], len: usize, warnings: &mut Vec<String>, what: &str) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|l| match data_labels.iter().position(|d| d == l) {
            Some(k) => rows[k].clone(),
            None => {
                warnings.push(format!("{what}: no data for age class {l}; using zeros"));
                vec![0.0; len]
            }
        })
        .collect()
}

fn warmup(cfg: &RunConfig, art: &mut RunArtifact) -> Result<Context> {
    let params = cfg.model.load()?;
    let labels = params.ages.labels().to_vec();
    let n = params.n_ages();

    let epi = match &cfg.data.epi {
        Some(path) => {
            let e = ingest_epi_data(path)?;
            art.warnings.extend(e.warnings.iter().cloned());
            art.warnings.extend(
                e.non_monotone
                    .iter()
                    .map(|(l, d)| format!("{d}: cumulative deceased decreased for {l}")),
            );
            Some(e)
        }
        None => None,
    };
    let vacc = match &cfg.data.vaccination {
        Some(path) => {
            let v = ingest_vaccination_data(path)?;
            art.warnings.extend(v.warnings.iter().cloned());
            Some(v)
        }
        None => None,
    };

    let weeks = weeks_for(total_days(cfg));
    let mut administered = DosingPolicy::zeros(n, weeks, cfg.policy.delta_w, vec![0.0; weeks])?;
    let mut data_budget = None;
    if let Some(v) = &vacc {
        let start = cfg
            .data
            .start_date
            .or(epi.as_ref().map(|e| e.start))
            .ok_or_else(|| IoError::Config("data.start_date is needed to align vaccination weeks".into()))?;
        let (u1, ur, totals) = align_vaccination(v, start, weeks);
        administered.u1 = by_label(&v.labels, &u1, &labels, weeks, &mut art.warnings, "vaccination");
        administered.u_r = by_label(&v.labels, &ur, &labels, weeks, &mut art.warnings, "vaccination");
        administered.n_week = totals.clone();
        data_budget = Some(totals);
    }

    let pick = |given: &Option<Vec<f64>>, from_data: Option<&Vec<Vec<f64>>>, what: &str| -> Result<Vec<f64>> {
        match (given, from_data) {
            (Some(v), _) if v.len() == n => Ok(v.clone()),
            (Some(v), _) => Err(IoError::Config(format!("initial.{what} has {} entries, expected {n}", v.len()))),
            (None, Some(rows)) => Ok(rows.iter().map(|r| r[0]).collect()),
            (None, None) => Ok(vec![0.0; n]),
        }
    };
    let mut warnings = Vec::new();
    let epi_rows = |sel: fn(&EpiSeries) -> &Vec<Vec<f64>>, warnings: &mut Vec<String>| {
        epi.as_ref()
            .map(|e| by_label(&e.labels, sel(e), &labels, e.n_days(), warnings, "epidemiological data"))
    };
    let data_i = epi_rows(|e| &e.infected, &mut warnings);
    let data_r = epi_rows(|e| &e.recovered, &mut Vec::new());
    let data_d = epi_rows(|e| &e.deceased, &mut Vec::new());
    art.warnings.extend(warnings);
    let infected = pick(&cfg.initial.infected, data_i.as_ref(), "infected")?;
    let recovered = pick(&cfg.initial.recovered, data_r.as_ref(), "recovered")?;
    let deceased = pick(&cfg.initial.deceased, data_d.as_ref(), "deceased")?;
    if infected.iter().all(|v| *v == 0.0) {
        art.warnings.push("no infected at day 0".into());
    }
    let x_start = initial_state(&params, &infected, &recovered, &deceased)?;
    Ok(Context {
        params,
        x_start,
        administered,
        data_budget,
        epi,
    })
}

fn initial_state(params: &ModelParams, infected: &[f64], recovered: &[f64], deceased: &[f64]) -> Result<EpiState> {
    let mut x = EpiState::zeros(params.n_ages());
    for i in 0..params.n_ages() {
        let s = params.ages.population(i) - infected[i] - recovered[i] - deceased[i];
        if s < 0.0 {
            return Err(IoError::Config(format!(
                "initial infected, recovered and deceased exceed the population of class {}",
                params.ages.labels()[i]
            )));
        }
        x.set(i, Compartment::Susceptible, s);
        x.set(i, Compartment::Infectious, infected[i]);
        x.set(i, Compartment::Recovered, recovered[i]);
        x.set(i, Compartment::Deceased, deceased[i]);
    }
    Ok(x)
}

/// Simulation week `k` takes the rates of the ISO week containing day
/// `7k + 3`.
fn align_vaccination(v: &VaccinationSeries, start: NaiveDate, weeks: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let n = v.labels.len();
    let mut u1 = vec![vec![0.0; weeks]; n];
    let mut ur = vec![vec![0.0; weeks]; n];
    let totals_data = v.weekly_totals();
    let mut totals = vec![0.0; weeks];
    for k in 0..weeks {
        let mid = start + Days::new(7 * k as u64 + 3);
        if let Some(w) = v.week_index(mid) {
            for i in 0..n {
                u1[i][k] = v.dose1[i][w];
                ur[i][k] = v.dose_recovered[i][w];
            }
            totals[k] = totals_data[w];
        }
    }
    (u1, ur, totals)
}

fn calibrate(cfg: &RunConfig, ctx: &mut Context, art: &mut RunArtifact) -> Result<()> {
    let c = cfg.calibration.as_ref().expect("calibration configured");
    let n = ctx.params.n_ages();
    let grid = GridSpec::daily(0.0, c.days as f64)?;
    let policy = ctx.administered.extended(weeks_for(c.days));
    let deceased = match (&c.synthetic, &ctx.epi) {
        (Some(truth), _) => {
            let mut p = ctx.params.clone();
            p.beta = PiecewiseConstant {
                phase_days: c.phase_days,
                values: truth.beta.clone(),
            };
            let mut data = make_synthetic_truth(
                &p,
                &ctx.x_start,
                &policy,
                &grid,
                NoiseScale::RelativeToFinal(truth.noise),
                truth.seed,
            )?;
            // Day-0 deaths are part of the known initial state.
            for (i, row) in data.iter_mut().enumerate() {
                row[0] = ctx.x_start.get(i, Compartment::Deceased);
            }
            data
        }
        (None, Some(epi)) => {
            if epi.n_days() < c.days as usize + 1 {
                return Err(IoError::Config(format!(
                    "epidemiological data covers {} days, calibration needs {}",
                    epi.n_days(),
                    c.days + 1
                )));
            }
            let rows = by_label(&epi.labels, &epi.deceased, ctx.params.ages.labels(), epi.n_days(), &mut art.warnings, "calibration");
            rows.into_iter().map(|r| r[..=c.days as usize].to_vec()).collect()
        }
        (None, None) => return Err(IoError::Config("calibration has no data".into())),
    };
    let mut chain = c.chain.clone();
    chain.seed = cfg.seed;
    let mut least_squares = c.least_squares.clone();
    least_squares.seed = cfg.seed;
    let spec = CalibrationSpec {
        n_phases: c.n_phases,
        phase_days: c.phase_days,
        fit_recovery: c.fit_recovery,
        fit_initial: c.fit_initial,
        priors: c.priors.clone(),
        data: CalibrationData {
            deceased,
            infected0: (0..n).map(|i| ctx.x_start.get(i, Compartment::Infectious)).collect(),
            recovered0: (0..n).map(|i| ctx.x_start.get(i, Compartment::Recovered)).collect(),
        },
        chain,
        least_squares,
    };
    let problem = CalibrationProblem::new(ctx.params.clone(), policy, spec)?;
    let ls = problem.least_squares_fit()?;
    if ls.flagged() {
        art.warnings.push(format!(
            "least squares: converged={}, parameters at bounds: {:?}",
            ls.converged, ls.at_bounds
        ));
    }
    let posterior = problem.mcmc_sample(&ls.estimate)?;
    if posterior.acceptance_warning {
        art.warnings.push(format!("MCMC acceptance rate {} outside [0.05, 0.6]", posterior.acceptance_rate));
    }
    let fitted = problem.from_vector(&posterior.medians(), &ls.estimate);
    let (params, x_start) = problem.instantiate(&fitted)?;
    if c.days < total_days(cfg) {
        art.warnings.push(format!(
            "transmission beyond day {} keeps the last calibrated phase",
            c.days
        ));
    }
    ctx.params = params;
    ctx.x_start = x_start;
    art.calibration = Some(CalibrationOutcome {
        least_squares: ls,
        summaries: posterior.summaries,
        acceptance_rate: posterior.acceptance_rate,
        acceptance_warning: posterior.acceptance_warning,
        noise_scale: posterior.noise_scale,
        fitted,
    });
    Ok(())
}

fn shifted_rows(rows: &[Vec<f64>], skip: usize, len: usize) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| (0..len).map(|k| r.get(skip + k).copied().unwrap_or(0.0)).collect())
        .collect()
}

fn baseline(cfg: &RunConfig, ctx: &Context, art: &mut RunArtifact) -> Result<Horizon> {
    let warm = cfg.warmup_days;
    let x0 = if warm > 0 {
        let grid = GridSpec::daily(0.0, warm as f64)?;
        let traj = integrate_forward(&ctx.x_start, &ctx.params, &ctx.administered, &grid)?;
        traj.last().clone()
    } else {
        ctx.x_start.clone()
    };
    let mut params = ctx.params.clone();
    if warm > 0 {
        params.beta = params.beta.extended_to(total_days(cfg) as f64);
        params = params.shifted(warm as f64)?;
    }
    let params = cfg.scenario.params(&params)?;

    let skip = warm as usize / 7;
    let n_weeks = weeks_for(cfg.scenario.horizon_days);
    let data_budget = ctx
        .data_budget
        .as_ref()
        .map(|b| b.iter().skip(skip).copied().collect::<Vec<f64>>());
    let budget = cfg.scenario.weekly_budget(data_budget.as_deref())?;
    let skeleton = DosingPolicy {
        u1: shifted_rows(&ctx.administered.u1, skip, n_weeks),
        delta_w: cfg.policy.delta_w,
        u_r: shifted_rows(&ctx.administered.u_r, skip, n_weeks),
        n_week: budget[..n_weeks].to_vec(),
        n_s: cfg.policy.capacity.unwrap_or(f64::INFINITY),
    };
    let initial = build_initial_guess(cfg.scenario.ig_kind, &params, &skeleton)?;
    let grid = GridSpec::daily(0.0, cfg.scenario.horizon_days as f64)?;
    let baseline = simulate_extended(cfg, &params, &x0, &grid, &initial, art)?;

    art.params = Some(params.clone());
    art.initial_state = Some(x0.clone());
    art.initial_policy = Some(initial.clone());
    art.baseline = Some(baseline);
    Ok(Horizon {
        params,
        x0,
        grid,
        initial,
    })
}

fn simulate_extended(
    cfg: &RunConfig,
    params: &ModelParams,
    x0: &EpiState,
    grid: &GridSpec,
    policy: &DosingPolicy,
    art: &mut RunArtifact,
) -> Result<Trajectory> {
    let (traj, warning) = extended_run(cfg, params, x0, grid, policy)?;
    art.warnings.extend(warning);
    Ok(traj)
}

fn extended_run(
    cfg: &RunConfig,
    params: &ModelParams,
    x0: &EpiState,
    grid: &GridSpec,
    policy: &DosingPolicy,
) -> Result<(Trajectory, Option<String>)> {
    let (grid, policy) = if cfg.scenario.extension_days > 0 {
        extension_preset(grid, policy, cfg.scenario.extension_days)?
    } else {
        (*grid, policy.clone())
    };
    let traj = integrate_forward(x0, params, &policy, &grid)?;
    let warning = negative_violation(&traj).map(|v| v.to_string());
    Ok((traj, warning))
}

/// What a written run needs to re-simulate edited policies.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub config: RunConfig,
    pub params: ModelParams,
    pub x0: EpiState,
    pub initial: DosingPolicy,
    pub optimal: Option<DosingPolicy>,
}

impl RunInputs {
    /// Reads a run directory; the run must have reached the baseline stage.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            std::fs::read(&path).map_err(|e| IoError::file(&path, e))
        };
        let config = RunConfig::from_toml_str(std::str::from_utf8(&read("config.toml")?).map_err(|e| IoError::Config(e.to_string()))?)?;
        let optimal = match dir.join("policy_optimal.json").exists() {
            true => Some(serde_json::from_slice(&read("policy_optimal.json")?)?),
            false => None,
        };
        Ok(Self {
            params: serde_json::from_slice(&read("params.json")?)?,
            x0: serde_json::from_slice(&read("initial_state.json")?)?,
            initial: serde_json::from_slice(&read("policy_initial.json")?)?,
            optimal,
            config,
        })
    }

    /// Projects first-dose rates `[age][week]` onto the run's feasible set.
    pub fn project(&self, u1: &[Vec<f64>]) -> Result<DosingPolicy> {
        Ok(project_feasible(u1, &self.initial)?)
    }

    /// Simulates over the run's horizon and extension.
    pub fn simulate(&self, policy: &DosingPolicy) -> Result<Trajectory> {
        let grid = GridSpec::daily(0.0, self.config.scenario.horizon_days as f64)?;
        Ok(extended_run(&self.config, &self.params, &self.x0, &grid, policy)?.0)
    }

    /// Cost of `policy` under the run's objective over the horizon.
    pub fn cost(&self, policy: &DosingPolicy) -> Result<f64> {
        let grid = GridSpec::daily(0.0, self.config.scenario.horizon_days as f64)?;
        let problem = ControlProblem::new(self.params.clone(), self.x0.clone(), grid, Objective::new(self.config.objective));
        Ok(problem.cost(policy)?)
    }
}

fn optimize(cfg: &RunConfig, h: &Horizon, art: &mut RunArtifact) -> Result<()> {
    let problem = ControlProblem::new(h.params.clone(), h.x0.clone(), h.grid, Objective::new(cfg.objective));
    let (policy, trace) = pgd_optimize(&h.initial, &problem, &cfg.pgd)?;
    if trace.armijo_failed {
        art.warnings.push("line search found no sufficient decrease; stopped early".into());
    } else if !trace.converged {
        art.warnings.push(format!("optimizer stopped after {} iterations without converging", trace.records.len()));
    }
    art.optimal = Some(simulate_extended(cfg, &h.params, &h.x0, &h.grid, &policy, art)?);
    art.optimal_policy = Some(policy);
    art.trace = Some(trace);
    Ok(())
}

fn diagnostics(cfg: &RunConfig, h: &Horizon, art: &mut RunArtifact) -> Result<()> {
    let base = art.baseline.as_ref().expect("baseline stage ran");
    if let Some(opt) = &art.optimal {
        art.variation = Some(variation_report(base, opt, &h.params)?);
    }
    let checkpoints = weekly_checkpoints(base, &cfg.diagnostics.scan_weeks);
    let mut scans = Vec::new();
    for axis in &cfg.diagnostics.scan_axes {
        scans.extend(sensitivity_scan(&h.params, &checkpoints, *axis, cfg.diagnostics.scan_resolution)?);
    }
    art.scans = scans;
    let weeks: Vec<usize> = (0..=base.grid().n_days() / 7).collect();
    let series = |t: &Trajectory| -> Result<Vec<f64>> {
        weeks
            .iter()
            .map(|w| Ok(reproduction_number(&h.params, t.state_at_day(w * 7), (w * 7) as f64)?))
            .collect()
    };
    let baseline = series(base)?;
    let optimal = art.optimal.as_ref().map(series).transpose()?;
    art.reproduction = Some(ReproductionSeries {
        weeks,
        baseline,
        optimal,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::{Manifest, MANIFEST};
    use crate::config::tests::SMALL;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::from_toml_str(SMALL).unwrap();
        cfg.pgd.max_iters = 20;
        cfg.diagnostics.scan_resolution = 3;
        cfg
    }

    #[test]
    fn full_run_completes_every_stage() {
        let art = run_pipeline(&small());
        assert!(art.succeeded(), "{:?}", art.failure);
        assert_eq!(art.stages_completed, ["warmup", "baseline", "optimization", "diagnostics"]);
        let trace = art.trace.as_ref().unwrap();
        assert!(trace.is_monotone());
        assert!(trace.final_cost() <= trace.initial_cost);
        assert_eq!(art.variation.as_ref().unwrap().len(), 29);
        assert_eq!(art.scans.len(), 2 * SCAN_WEEKS_IN_HORIZON);
        assert_eq!(art.reproduction.as_ref().unwrap().weeks.len(), 5);
        for (name, bytes) in art.render().unwrap() {
            if !name.ends_with(".csv") {
                continue;
            }
            let text = String::from_utf8(bytes).unwrap();
            let mut lines = text.lines();
            let width = lines.next().unwrap().split(',').count();
            for line in lines {
                assert_eq!(line.split(',').count(), width, "{name}: {line}");
            }
        }
    }

    const SCAN_WEEKS_IN_HORIZON: usize = 2;

    #[test]
    fn without_optimization_only_the_baseline_is_produced() {
        let mut cfg = small();
        cfg.optimize = false;
        let art = run_pipeline(&cfg);
        assert!(art.succeeded());
        assert!(art.optimal.is_none() && art.trace.is_none() && art.variation.is_none());
        let files = art.render().unwrap();
        assert!(files.contains_key("trajectory_baseline.csv"));
        assert!(!files.contains_key("trajectory_optimal.csv"));
    }

    #[test]
    fn failure_is_tagged_with_its_stage() {
        let mut cfg = small();
        cfg.initial.infected = Some(vec![2e6; 5]);
        let art = run_pipeline(&cfg);
        let failure = art.failure.as_ref().unwrap();
        assert_eq!(failure.stage, "warmup");
        assert!(art.stages_completed.is_empty());
        assert!(art.render().unwrap().contains_key("status.json"));
    }

    #[test]
    fn written_runs_resimulate_bit_exactly() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let (art, _) = run_and_write(&cfg, dir.path()).unwrap();
        let inputs = RunInputs::load(dir.path()).unwrap();
        assert_eq!(&inputs.params, art.params.as_ref().unwrap());
        assert_eq!(&inputs.x0, art.initial_state.as_ref().unwrap());
        let base = inputs.simulate(&inputs.initial).unwrap();
        assert_eq!(base.states(), art.baseline.as_ref().unwrap().states());
        let optimal = inputs.optimal.clone().unwrap();
        assert_eq!(&optimal, art.optimal_policy.as_ref().unwrap());
        assert_eq!(inputs.project(&optimal.u1).unwrap(), optimal);
        assert_eq!(inputs.cost(&optimal).unwrap(), art.trace.as_ref().unwrap().final_cost());
    }

    #[test]
    fn json_round_trips_are_bit_exact() {
        let art = run_pipeline(&small());
        let params = art.params.as_ref().unwrap();
        let back: ModelParams = serde_json::from_slice(&serde_json::to_vec(params).unwrap()).unwrap();
        assert_eq!(&back, params);
        let policy = art.optimal_policy.as_ref().unwrap();
        let back: DosingPolicy = serde_json::from_str(&serde_json::to_string(policy).unwrap()).unwrap();
        let bits = |p: &DosingPolicy| p.u1.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(policy));
        let traj = art.baseline.as_ref().unwrap();
        let back: Trajectory = serde_json::from_slice(&serde_json::to_vec(traj).unwrap()).unwrap();
        assert_eq!(back.states(), traj.states());
    }

    #[test]
    fn synthetic_calibration_recovers_truth() {
        let mut cfg = small();
        let mut p = cfg.model.load().unwrap();
        p.ages = vaxopt_core::AgeAxis::new(vec!["all".into()], vec![1e6]).unwrap();
        p.susceptibility = vec![1.0];
        p.ifr = vec![0.02];
        p.mu_r = 0.0;
        p.contact = vec![vec![1.0]];
        p.hosp_propensity = vec![1.0];
        p.gamma = 1.0 / 14.2;
        p.beta = PiecewiseConstant {
            phase_days: 21.0,
            values: vec![0.1, 0.1],
        };
        cfg.model = crate::config::ModelSource::Inline { params: p };
        cfg.initial.infected = Some(vec![1000.0]);
        cfg.warmup_days = 0;
        cfg.optimize = false;
        cfg.calibration = Some(
            toml::from_str(
                "days = 42\nn_phases = 2\nphase_days = 21.0\nsynthetic = { beta = [0.12, 0.08], noise = 0.01, seed = 5 }",
            )
            .unwrap(),
        );
        let art = run_pipeline(&cfg);
        assert!(art.succeeded(), "{:?}", art.failure);
        let cal = art.calibration.as_ref().unwrap();
        for (k, truth) in [0.12, 0.08].iter().enumerate() {
            let s = cal.summaries.iter().find(|s| s.name == format!("beta[{k}]")).unwrap();
            assert!((s.median - truth).abs() <= 0.1 * truth, "{s:?}");
            assert!(s.ci_low <= *truth && *truth <= s.ci_high, "{s:?}");
            assert!((cal.least_squares.estimate.beta[k] - truth).abs() <= 0.05 * truth);
        }
        assert_eq!(art.params.as_ref().unwrap().beta.values[0], cal.fitted.beta[0]);
    }

    #[test]
    fn repeated_runs_write_identical_artifacts() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let (_, a) = run_and_write(&cfg, &dir.path().join("a")).unwrap();
        let (_, b) = run_and_write(&cfg, &dir.path().join("b")).unwrap();
        assert_eq!(a.content_hash, b.content_hash);
        assert_eq!(a.files, b.files);
        let loaded = Manifest::load(&dir.path().join("a")).unwrap();
        assert_eq!(loaded, a);
        assert!(loaded.verify(&dir.path().join("a")).unwrap());
        assert!(dir.path().join("a").join(MANIFEST).exists());
        assert!(run_and_write(&cfg, &dir.path().join("a")).is_err());
    }
}
