//! Reproduction numbers, sensitivity surfaces, saved-individual diagnostics
//! and scenario builders.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{project_feasible, DosingPolicy, DAYS_PER_WEEK};
use crate::dynamics::hospitalized_from;
use crate::error::{CoreError, Result};
use crate::model::{EpiState, ModelParams, PiecewiseConstant, S, V, W};
use crate::trajectory::{GridSpec, Trajectory};

/// Relative gap between the Collatz-Wielandt bounds at which power
/// iteration stops.
pub const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Next-generation matrix `K_ik = (beta r_i / gamma) E_i C_ik / N_i` with
/// `E = S + sigma_V V + sigma_W W`.
pub fn next_generation_matrix(params: &ModelParams, beta: f64, state: &EpiState) -> Result<Vec<Vec<f64>>> {
    let n = params.n_ages();
    if state.n_ages() != n {
        return Err(CoreError::Dimension {
            what: "state age classes",
            expected: n,
            got: state.n_ages(),
        });
    }
    let pops = params.ages.populations();
    Ok((0..n)
        .map(|i| {
            let b = &state.blocks()[i];
            let exposed = b[S] + params.sigma_v * b[V] + params.sigma_w * b[W];
            let scale = beta * params.susceptibility[i] / params.gamma * exposed / pops[i];
            params.contact[i].iter().map(|c| scale * c).collect()
        })
        .collect())
}

/// Spectral radius of a non-negative matrix.
///
/// Power iteration with Collatz-Wielandt bounds; a dense eigensolve is used
/// when the bounds do not meet.
pub fn spectral_radius(k: &[Vec<f64>]) -> Result<f64> {
    let n = k.len();
    if n == 0 {
        return Err(CoreError::Eigen("empty matrix".into()));
    }
    if k.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::Eigen("non-finite entries".into()));
    }
    if n == 1 {
        return Ok(k[0][0].abs());
    }
    if k.iter().flatten().any(|v| *v < 0.0) {
        return dense_radius(k);
    }
    let mut x = vec![1.0; n];
    let mut y = vec![0.0; n];
    for _ in 0..POWER_MAX_ITERS {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = k[i].iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        if y.iter().all(|v| *v == 0.0) {
            break;
        }
        if x.iter().all(|v| *v > 0.0) {
            let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
            for (yi, xi) in y.iter().zip(&x) {
                let r = yi / xi;
                lo = lo.min(r);
                hi = hi.max(r);
            }
            if hi - lo <= POWER_TOL * hi {
                return Ok(0.5 * (lo + hi));
            }
        }
        let norm = y.iter().fold(0.0_f64, |a, b| a.max(*b));
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
    }
    dense_radius(k)
}

fn dense_radius(k: &[Vec<f64>]) -> Result<f64> {
    let n = k.len();
    let m = DMatrix::from_fn(n, n, |i, j| k[i][j]);
    let eig = m.complex_eigenvalues();
    let r = eig.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    if r.is_finite() {
        Ok(r)
    } else {
        Err(CoreError::Eigen("dense eigensolve failed".into()))
    }
}

/// Effective reproduction number at `state`, with the transmission rate of
/// time `t`.
pub fn reproduction_number(params: &ModelParams, state: &EpiState, t: f64) -> Result<f64> {
    reproduction_number_with_beta(params, state, params.beta.at(t))
}

pub fn reproduction_number_with_beta(params: &ModelParams, state: &EpiState, beta: f64) -> Result<f64> {
    spectral_radius(&next_generation_matrix(params, beta, state)?)
}

/// Parameter pair swept by a sensitivity scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanAxis {
    /// `(sigma_V, sigma_W)`
    Sigma,
    /// `(theta_V, theta_W)`
    Theta,
}

impl ScanAxis {
    fn apply(self, params: &mut ModelParams, a: f64, b: f64) {
        match self {
            ScanAxis::Sigma => {
                params.sigma_v = a;
                params.sigma_w = b;
            }
            ScanAxis::Theta => {
                params.theta_v = a;
                params.theta_w = b;
            }
        }
    }
}

impl std::str::FromStr for ScanAxis {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(ScanAxis::Sigma),
            "theta" => Ok(ScanAxis::Theta),
            other => Err(CoreError::Config(format!("unknown scan axis `{other}`"))),
        }
    }
}

/// Default checkpoint weeks.
pub const SCAN_WEEKS: [usize; 6] = [0, 4, 8, 12, 16, 20];

/// `R_t` over a square grid on `[0,1]^2` at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSurface {
    pub week: usize,
    pub axis: ScanAxis,
    /// Grid values shared by both axes.
    pub levels: Vec<f64>,
    /// `values[a][b]` at first parameter `levels[a]`, second `levels[b]`.
    pub values: Vec<Vec<f64>>,
    /// `R_t` at the unmodified parameters.
    pub reference: f64,
    /// `values - reference`.
    pub increments: Vec<Vec<f64>>,
}

impl ScanSurface {
    /// Max minus min over the surface.
    pub fn range(&self) -> f64 {
        let (lo, hi) = self
            .values
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        hi - lo
    }
}

/// States at the start of the given weeks; weeks past the horizon are
/// skipped.
pub fn weekly_checkpoints(traj: &Trajectory, weeks: &[usize]) -> Vec<(usize, EpiState)> {
    let n_days = traj.grid().n_days();
    weeks
        .iter()
        .filter(|w| **w * 7 <= n_days)
        .map(|&w| (w, traj.state_at_day(w * 7).clone()))
        .collect()
}

/// Evaluates `R_t` over `resolution x resolution` parameter values at every
/// checkpoint. The transmission rate is the one in force at the checkpoint.
pub fn sensitivity_scan(
    params: &ModelParams,
    checkpoints: &[(usize, EpiState)],
    axis: ScanAxis,
    resolution: usize,
) -> Result<Vec<ScanSurface>> {
    if resolution < 2 {
        return Err(CoreError::Config("scan resolution must be at least 2".into()));
    }
    let levels: Vec<f64> = (0..resolution).map(|k| k as f64 / (resolution - 1) as f64).collect();
    checkpoints
        .iter()
        .map(|(week, state)| {
            let t = *week as f64 * DAYS_PER_WEEK;
            let beta = params.beta.at(t);
            let reference = reproduction_number_with_beta(params, state, beta)?;
            let cells: Vec<(usize, usize)> = (0..resolution)
                .flat_map(|a| (0..resolution).map(move |b| (a, b)))
                .collect();
            let flat: Vec<f64> = cells
                .par_iter()
                .map(|&(a, b)| {
                    let mut p = params.clone();
                    axis.apply(&mut p, levels[a], levels[b]);
                    reproduction_number_with_beta(&p, state, beta)
                })
                .collect::<Result<_>>()?;
            let values: Vec<Vec<f64>> = flat.chunks(resolution).map(<[f64]>::to_vec).collect();
            let increments = values
                .iter()
                .map(|row| row.iter().map(|v| v - reference).collect())
                .collect();
            Ok(ScanSurface {
                week: *week,
                axis,
                levels: levels.clone(),
                values,
                reference,
                increments,
            })
        })
        .collect()
}

/// Daily differences (baseline minus optimized) of age-summed infected,
/// hospitalized and deceased. Positive values are individuals saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub base_id: String,
    pub opt_id: String,
    pub lambda_i: Vec<f64>,
    pub lambda_h: Vec<f64>,
    pub lambda_d: Vec<f64>,
}

impl VariationReport {
    pub fn len(&self) -> usize {
        self.lambda_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_i.is_empty()
    }
}

/// Age-summed `(I, H, D)` at each whole day of the horizon (both ends
/// included).
pub fn daily_totals(traj: &Trajectory, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let grid = traj.grid();
    let ta = params.onset_delay as f64;
    let n = grid.n_days() + 1;
    let (mut inf, mut hosp, mut dec) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (day, now) in traj.daily().enumerate() {
        let t = grid.t0 + day as f64;
        let delayed = traj.at((t - ta).max(grid.t0))?;
        inf.push(now.compartment_total(crate::Compartment::Infectious));
        dec.push(now.compartment_total(crate::Compartment::Deceased));
        hosp.push(
            (0..now.n_ages())
                .map(|i| hospitalized_from(params, i, &now.blocks()[i], &delayed.blocks()[i]))
                .sum(),
        );
    }
    Ok((inf, hosp, dec))
}

pub fn variation_report(base: &Trajectory, opt: &Trajectory, params: &ModelParams) -> Result<VariationReport> {
    variation_report_named(base, opt, params, "baseline", "optimized")
}

pub fn variation_report_named(
    base: &Trajectory,
    opt: &Trajectory,
    params: &ModelParams,
    base_id: &str,
    opt_id: &str,
) -> Result<VariationReport> {
    if base.grid() != opt.grid() {
        return Err(CoreError::InvalidGrid(format!(
            "trajectory grids differ: {:?} vs {:?}",
            base.grid(),
            opt.grid()
        )));
    }
    let (bi, bh, bd) = daily_totals(base, params)?;
    let (oi, oh, od) = daily_totals(opt, params)?;
    let diff = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(VariationReport {
        base_id: base_id.into(),
        opt_id: opt_id.into(),
        lambda_i: diff(bi, oi),
        lambda_h: diff(bh, oh),
        lambda_d: diff(bd, od),
    })
}

/// Starting policy for the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialGuess {
    /// First doses already in the skeleton (administered campaign data).
    Dpc,
    /// Whole weekly budget split by population.
    Homogeneous,
    /// Half the weekly budget split by population.
    Ig1,
    /// Half the weekly budget split by IFR.
    Ig2,
    /// Whole weekly budget in alternating 21-day on/off phases, split by
    /// population.
    Ig3,
}

impl InitialGuess {
    pub const ALL: [InitialGuess; 5] = [
        InitialGuess::Dpc,
        InitialGuess::Homogeneous,
        InitialGuess::Ig1,
        InitialGuess::Ig2,
        InitialGuess::Ig3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitialGuess::Dpc => "dpc",
            InitialGuess::Homogeneous => "homogeneous",
            InitialGuess::Ig1 => "ig1",
            InitialGuess::Ig2 => "ig2",
            InitialGuess::Ig3 => "ig3",
        }
    }
}

impl std::str::FromStr for InitialGuess {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown initial guess `{s}`")))
    }
}

/// Length of the on and off phases of the square wave, in days.
pub const SQUARE_WAVE_DAYS: f64 = 21.0;

/// Raw first-dose rates of an initial guess, before projection.
pub fn initial_guess_rates(kind: InitialGuess, params: &ModelParams, skeleton: &DosingPolicy) -> Vec<Vec<f64>> {
    let n_weeks = skeleton.n_weeks();
    let pops = params.ages.populations();
    let total_pop: f64 = pops.iter().sum();
    let total_ifr: f64 = params.ifr.iter().sum();
    let daily = |j: usize| skeleton.week_cap(j).min(skeleton.n_week[j]) / DAYS_PER_WEEK;
    (0..params.n_ages())
        .map(|i| {
            let pop_share = pops[i] / total_pop;
            (0..n_weeks)
                .map(|j| match kind {
                    InitialGuess::Dpc => skeleton.u1[i][j],
                    InitialGuess::Homogeneous => daily(j) * pop_share,
                    InitialGuess::Ig1 => 0.5 * daily(j) * pop_share,
                    InitialGuess::Ig2 => 0.5 * daily(j) * params.ifr[i] / total_ifr,
                    InitialGuess::Ig3 => {
                        let start = j as f64 * DAYS_PER_WEEK;
                        if ((start / SQUARE_WAVE_DAYS).floor() as u64) % 2 == 0 {
                            daily(j) * pop_share
                        } else {
                            0.0
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Initial guess projected onto the feasible set of `skeleton`.
pub fn build_initial_guess(kind: InitialGuess, params: &ModelParams, skeleton: &DosingPolicy) -> Result<DosingPolicy> {
    if skeleton.n_ages() != params.n_ages() {
        return Err(CoreError::Dimension {
            what: "policy age classes",
            expected: params.n_ages(),
            got: skeleton.n_ages(),
        });
    }
    project_feasible(&initial_guess_rates(kind, params, skeleton), skeleton)
}

/// Weekly budget of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BudgetMode {
    /// Budgets taken from administered-dose data.
    DataDriven,
    Constant { per_week: f64 },
}

/// What-if scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub ig_kind: InitialGuess,
    #[serde(default)]
    pub r0_target: Option<f64>,
    pub budget: BudgetMode,
    pub horizon_days: u32,
    #[serde(default)]
    pub extension_days: u32,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(r0) = self.r0_target {
            if !(r0.is_finite() && r0 > 0.0) {
                return Err(CoreError::InvalidParameter {
                    name: "r0_target",
                    reason: format!("must be positive, got {r0}"),
                });
            }
        }
        if let BudgetMode::Constant { per_week } = self.budget {
            if !(per_week.is_finite() && per_week >= 0.0) {
                return Err(CoreError::InvalidParameter {
                    name: "budget",
                    reason: format!("must be non-negative, got {per_week}"),
                });
            }
        }
        if self.horizon_days == 0 {
            return Err(CoreError::InvalidParameter {
                name: "horizon_days",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Weeks needed to cover horizon plus extension.
    pub fn n_weeks(&self) -> usize {
        ((self.horizon_days + self.extension_days) as f64 / DAYS_PER_WEEK).ceil() as usize
    }

    /// Weekly budgets; data-driven budgets are padded with their last value.
    pub fn weekly_budget(&self, data: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.n_weeks();
        match (&self.budget, data) {
            (BudgetMode::Constant { per_week }, _) => Ok(vec![*per_week; n]),
            (BudgetMode::DataDriven, Some(d)) if !d.is_empty() => {
                let mut out: Vec<f64> = d.iter().take(n).copied().collect();
                let last = *d.last().unwrap();
                out.resize(n, last);
                Ok(out)
            }
            (BudgetMode::DataDriven, _) => Err(CoreError::EmptySeries("weekly dose budget")),
        }
    }

    /// Applies the fixed reproduction number, if any.
    pub fn params(&self, base: &ModelParams) -> Result<ModelParams> {
        match self.r0_target {
            Some(r0) => fixed_r0_params(base, r0),
            None => Ok(base.clone()),
        }
    }
}

/// Copy of `base` with a constant transmission rate `r0 * gamma`.
pub fn fixed_r0_params(base: &ModelParams, r0: f64) -> Result<ModelParams> {
    if !(r0.is_finite() && r0 > 0.0) {
        return Err(CoreError::InvalidParameter {
            name: "r0",
            reason: format!("must be positive, got {r0}"),
        });
    }
    let mut out = base.clone();
    out.beta = PiecewiseConstant {
        phase_days: base.beta.phase_days,
        values: vec![r0 * base.gamma; base.beta.values.len().max(1)],
    };
    Ok(out)
}

/// Horizon extension with no first doses after the original schedule.
/// Returns the longer grid and the padded policy.
pub fn extension_preset(grid: &GridSpec, policy: &DosingPolicy, extra_days: u32) -> Result<(GridSpec, DosingPolicy)> {
    let tf = grid.tf + extra_days as f64;
    let ext = GridSpec::with_step(grid.t0, tf, grid.step)?;
    let weeks = ((tf - grid.t0) / DAYS_PER_WEEK).ceil() as usize;
    let mut out = policy.extended(weeks);
    let first_new = policy.n_weeks();
    for row in out.u1.iter_mut() {
        for v in row.iter_mut().skip(first_new) {
            *v = 0.0;
        }
    }
    out.validate()?;
    Ok((ext, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgeAxis;

    fn one_age(beta: f64) -> ModelParams {
        let ages = AgeAxis::new(vec!["all".into()], vec![1e6]).unwrap();
        ModelParams {
            ages,
            beta: PiecewiseConstant::constant(beta, 4),
            gamma: 0.07,
            susceptibility: vec![1.0],
            ifr: vec![0.01],
            sigma_v: 0.21,
            sigma_w: 0.21,
            theta_v: 0.2,
            theta_w: 0.037,
            mu_r: 0.0,
            contact: vec![vec![1.0]],
            onset_delay: 15,
            detection: PiecewiseConstant::constant(1.0, 1),
            hosp_fraction: 0.1,
            hosp_propensity: vec![1.0],
        }
    }

    #[test]
    fn single_age_reproduction_number() {
        let p = one_age(0.091);
        let x = EpiState::seeded(&p.ages, &[0.0]);
        let r = reproduction_number(&p, &x, 0.0).unwrap();
        assert!((r - 1.3).abs() < 1e-12, "{r}");
        let mut half = EpiState::zeros(1);
        half.set(0, crate::Compartment::Susceptible, 5e5);
        let r = reproduction_number(&p, &half, 0.0).unwrap();
        assert!((r - 0.65).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_matches_dense() {
        let k = vec![
            vec![2.0, 1.0, 0.0],
            vec![0.5, 1.0, 0.3],
            vec![0.0, 0.2, 0.7],
        ];
        let a = spectral_radius(&k).unwrap();
        let b = dense_radius(&k).unwrap();
        assert!((a - b).abs() < 1e-9 * b);
        // reducible with a zero block
        let z = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        assert!(spectral_radius(&z).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fixed_r0_round_trip() {
        let p = fixed_r0_params(&one_age(0.3), 0.72).unwrap();
        assert!(p.beta.values.iter().all(|b| (b - 0.0504).abs() < 1e-15));
        let x = EpiState::seeded(&p.ages, &[0.0]);
        assert!((reproduction_number(&p, &x, 3.0).unwrap() - 0.72).abs() < 1e-12);
        let q = fixed_r0_params(&p, 1.01).unwrap();
        assert!((q.beta.values[0] - 0.0707).abs() < 1e-15);
        assert!(fixed_r0_params(&p, 0.0).is_err());
    }

    #[test]
    fn full_vaccination_without_leak_stops_transmission() {
        let mut p = one_age(0.2);
        p.sigma_v = 0.0;
        p.sigma_w = 0.0;
        let mut x = EpiState::zeros(1);
        x.set(0, crate::Compartment::FirstDose, 1e6);
        assert_eq!(reproduction_number(&p, &x, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ig2_share_of_oldest_class() {
        let ages = AgeAxis::standard([1e7, 1.2e7, 1.8e7, 1.4e7, 4e6]).unwrap();
        let contact = vec![vec![1.0; 5]; 5];
        let params = ModelParams::reference(ages, contact, PiecewiseConstant::constant(0.1, 1), 0.1, vec![1.0; 5])
            .unwrap();
        let skeleton = DosingPolicy::zeros(5, 4, 21, vec![7e5; 4]).unwrap();
        let g = build_initial_guess(InitialGuess::Ig2, &params, &skeleton).unwrap();
        let doses = g.first_doses_by_age();
        let share = doses[4] / doses.iter().sum::<f64>();
        assert!((share - 0.072 / 0.1002).abs() < 1e-12, "{share}");
        assert!(g.is_feasible());
    }

    #[test]
    fn square_wave_phases() {
        let p = one_age(0.1);
        let skeleton = DosingPolicy::zeros(1, 8, 21, vec![7000.0; 8]).unwrap();
        let g = build_initial_guess(InitialGuess::Ig3, &p, &skeleton).unwrap();
        assert_eq!(g.evaluate_control(0, 10.0).unwrap().0, 1000.0);
        assert_eq!(g.evaluate_control(0, 25.0).unwrap().0, 0.0);
        assert_eq!(g.evaluate_control(0, 25.0).unwrap().1, 1000.0);
        assert!(g.is_feasible());
    }

    #[test]
    fn identical_trajectories_give_zero_report() {
        let p = one_age(0.2);
        let x0 = EpiState::seeded(&p.ages, &[100.0]);
        let grid = GridSpec::daily(0.0, 21.0).unwrap();
        let policy = DosingPolicy::zeros(1, 3, 7, vec![0.0; 3]).unwrap();
        let traj = crate::integrator::integrate_forward(&x0, &p, &policy, &grid).unwrap();
        let rep = variation_report(&traj, &traj, &p).unwrap();
        assert_eq!(rep.len(), 22);
        assert!(rep.lambda_i.iter().chain(&rep.lambda_h).chain(&rep.lambda_d).all(|v| *v == 0.0));
    }

    #[test]
    fn extension_zeroes_new_first_doses() {
        let grid = GridSpec::daily(0.0, 14.0).unwrap();
        let mut policy = DosingPolicy::zeros(1, 2, 7, vec![1e4; 2]).unwrap();
        policy.u1[0] = vec![500.0, 600.0];
        let (g, p) = extension_preset(&grid, &policy, 40).unwrap();
        assert_eq!(g.tf, 54.0);
        assert_eq!(p.n_weeks(), 8);
        assert_eq!(p.u1[0][..2], [500.0, 600.0]);
        assert!(p.u1[0][2..].iter().all(|v| *v == 0.0));
        assert_eq!(p.u2_week(0, 2), 600.0);
    }
}
