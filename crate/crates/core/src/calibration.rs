//! Fitting transmission phases, recovery time and initial-state factors to
//! observed deceased series: bounded Nelder-Mead least squares followed by
//! random-walk Metropolis-Hastings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::DosingPolicy;
use crate::error::{CoreError, Result};
use crate::integrator::integrate_forward;
use crate::model::{EpiState, ModelParams, PiecewiseConstant, D, I, R, S};
use crate::trajectory::{GridSpec, Trajectory};

/// Lower end of the transmission-rate box.
pub const BETA_FLOOR: f64 = 1e-6;
/// Box searched for the recovery time in the least-squares stage (days).
pub const RECOVERY_BOX: (f64, f64) = (1.0, 100.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    /// Uniform prior interval of every initial-state factor.
    pub zeta_low: f64,
    pub zeta_high: f64,
    pub recovery_mean: f64,
    pub recovery_variance: f64,
    /// Standard deviation of each transmission prior relative to its
    /// least-squares estimate.
    pub beta_relative_sd: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            zeta_low: 0.7,
            zeta_high: 1.3,
            recovery_mean: 14.2,
            recovery_variance: 5.94,
            beta_relative_sd: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    /// Total iterations including burn-in.
    pub samples: usize,
    pub burn_in_fraction: f64,
    /// Proposal standard deviation as a fraction of each prior's width.
    pub proposal_fraction: f64,
    pub target_acceptance: f64,
    /// Burn-in iterations between proposal rescalings; 0 disables adaptation.
    pub adapt_interval: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            samples: 50_000,
            burn_in_fraction: 0.2,
            proposal_fraction: 0.02,
            target_acceptance: 0.23,
            adapt_interval: 100,
            seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn burn_in(&self) -> usize {
        (self.samples as f64 * self.burn_in_fraction).floor() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 || !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(CoreError::Config(format!(
                "chain needs samples > 0 and burn-in fraction in [0,1), got {} and {}",
                self.samples, self.burn_in_fraction
            )));
        }
        if !(self.proposal_fraction >= 0.0) || !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(CoreError::Config("invalid proposal settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeastSquaresConfig {
    /// Nelder-Mead runs; each restart begins at the best point so far with a
    /// randomized simplex.
    pub restarts: usize,
    pub max_evals: usize,
    /// Relative spread of simplex values at which a run stops.
    pub ftol: f64,
    /// Simplex diameter (unit-box coordinates) at which a run stops.
    pub xtol: f64,
    pub seed: u64,
}

impl Default for LeastSquaresConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_evals: 4000,
            ftol: 1e-12,
            xtol: 1e-9,
            seed: 0,
        }
    }
}

/// Observed series and the initial values they start from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationData {
    /// Cumulative deceased, `[age][day]`, day 0 at the grid start.
    pub deceased: Vec<Vec<f64>>,
    /// Observed infectious and recovered at day 0.
    pub infected0: Vec<f64>,
    pub recovered0: Vec<f64>,
}

impl CalibrationData {
    pub fn n_days(&self) -> usize {
        self.deceased.first().map_or(0, |d| d.len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub n_phases: usize,
    #[serde(default = "week")]
    pub phase_days: f64,
    #[serde(default)]
    pub fit_recovery: bool,
    #[serde(default)]
    pub fit_initial: bool,
    #[serde(default)]
    pub priors: Priors,
    pub data: CalibrationData,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub least_squares: LeastSquaresConfig,
}

fn week() -> f64 {
    7.0
}

/// One point of the parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub beta: Vec<f64>,
    pub recovery_time: f64,
    /// `[zeta_S, zeta_I, zeta_R]` per age.
    pub zeta: Vec<[f64; 3]>,
}

/// Calibration instance: fixed parameters, administered doses and the
/// observation setup.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub base: ModelParams,
    pub policy: DosingPolicy,
    pub spec: CalibrationSpec,
    grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresResult {
    pub estimate: Candidate,
    pub error: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Parameters that ended within 1% of their box bounds.
    pub at_bounds: Vec<String>,
}

impl LeastSquaresResult {
    pub fn flagged(&self) -> bool {
        !self.converged || !self.at_bounds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub names: Vec<String>,
    /// Post burn-in draws, `[parameter][draw]`.
    pub chains: Vec<Vec<f64>>,
    pub summaries: Vec<ParameterSummary>,
    pub acceptance_rate: f64,
    /// Acceptance rate fell outside `[0.05, 0.6]`.
    pub acceptance_warning: bool,
    /// Likelihood noise scale.
    pub noise_scale: f64,
}

impl Posterior {
    pub fn summary(&self, name: &str) -> Option<&ParameterSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn medians(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.median).collect()
    }
}

impl CalibrationProblem {
    pub fn new(base: ModelParams, policy: DosingPolicy, spec: CalibrationSpec) -> Result<Self> {
        base.validate()?;
        let n = base.n_ages();
        let data = &spec.data;
        if data.deceased.len() != n || data.infected0.len() != n || data.recovered0.len() != n {
            return Err(CoreError::Dimension {
                what: "calibration data age classes",
                expected: n,
                got: data.deceased.len(),
            });
        }
        let days = data.n_days();
        if days == 0 || data.deceased.iter().any(|d| d.len() != days + 1) {
            return Err(CoreError::EmptySeries("deceased data"));
        }
        if data.deceased.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Calibration("deceased data has non-finite entries".into()));
        }
        if spec.n_phases == 0 || !(spec.phase_days > 0.0) {
            return Err(CoreError::Config("calibration needs at least one positive-length phase".into()));
        }
        let p = &spec.priors;
        if !(p.zeta_low > 0.0 && p.zeta_low < p.zeta_high && p.recovery_mean > 0.0 && p.recovery_variance > 0.0)
            || !(p.beta_relative_sd > 0.0)
        {
            return Err(CoreError::Config("malformed priors".into()));
        }
        spec.chain.validate()?;
        let grid = GridSpec::daily(0.0, days as f64)?;
        if policy.n_ages() != n || policy.span_days() < grid.tf {
            return Err(CoreError::Horizon {
                t: grid.tf,
                start: 0.0,
                end: policy.span_days(),
            });
        }
        Ok(Self {
            base,
            policy,
            spec,
            grid,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn n_params(&self) -> usize {
        let n = self.base.n_ages();
        self.spec.n_phases + usize::from(self.spec.fit_recovery) + if self.spec.fit_initial { 3 * n } else { 0 }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.spec.n_phases).map(|k| format!("beta[{k}]")).collect();
        if self.spec.fit_recovery {
            out.push("t_r".into());
        }
        if self.spec.fit_initial {
            for tag in ["zeta_s", "zeta_i", "zeta_r"] {
                out.extend((0..self.base.n_ages()).map(|i| format!("{tag}[{i}]")));
            }
        }
        out
    }

    /// Candidate holding the base parameters' values.
    pub fn default_candidate(&self) -> Candidate {
        let beta = (0..self.spec.n_phases)
            .map(|k| self.base.beta.at(k as f64 * self.spec.phase_days))
            .collect();
        Candidate {
            beta,
            recovery_time: self.base.recovery_time(),
            zeta: vec![[1.0; 3]; self.base.n_ages()],
        }
    }

    pub fn to_vector(&self, c: &Candidate) -> Vec<f64> {
        let mut out = c.beta.clone();
        if self.spec.fit_recovery {
            out.push(c.recovery_time);
        }
        if self.spec.fit_initial {
            for x in 0..3 {
                out.extend(c.zeta.iter().map(|z| z[x]));
            }
        }
        out
    }

    /// Candidate from a parameter vector; fixed parts come from `template`.
    pub fn from_vector(&self, v: &[f64], template: &Candidate) -> Candidate {
        let np = self.spec.n_phases;
        let n = self.base.n_ages();
        let mut c = template.clone();
        c.beta = v[..np].to_vec();
        let mut pos = np;
        if self.spec.fit_recovery {
            c.recovery_time = v[pos];
            pos += 1;
        }
        if self.spec.fit_initial {
            for x in 0..3 {
                for i in 0..n {
                    c.zeta[i][x] = v[pos + x * n + i];
                }
            }
        }
        c
    }

    /// Least-squares box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let np = self.spec.n_phases;
        let mut lo = vec![BETA_FLOOR; np];
        let mut hi = vec![1.0; np];
        if self.spec.fit_recovery {
            lo.push(RECOVERY_BOX.0);
            hi.push(RECOVERY_BOX.1);
        }
        if self.spec.fit_initial {
            let k = 3 * self.base.n_ages();
            lo.extend(std::iter::repeat_n(self.spec.priors.zeta_low, k));
            hi.extend(std::iter::repeat_n(self.spec.priors.zeta_high, k));
        }
        (lo, hi)
    }

    /// Model parameters and initial state of a candidate.
    pub fn instantiate(&self, c: &Candidate) -> Result<(ModelParams, EpiState)> {
        let mut params = self.base.clone();
        params.beta = PiecewiseConstant {
            phase_days: self.spec.phase_days,
            values: c.beta.clone(),
        };
        params.gamma = 1.0 / c.recovery_time;
        params.validate()?;
        let data = &self.spec.data;
        let blocks = (0..params.n_ages())
            .map(|i| {
                let [zs, zi, zr] = c.zeta[i];
                let mut b = [0.0; crate::model::N_COMPARTMENTS];
                b[D] = data.deceased[i][0];
                b[I] = zi * data.infected0[i];
                b[R] = zr * data.recovered0[i];
                b[S] = (params.ages.population(i) - b[I] - b[R] - b[D]) * zs;
                b
            })
            .collect();
        Ok((params, EpiState::from_blocks(blocks)))
    }

    pub fn simulate(&self, c: &Candidate) -> Result<Trajectory> {
        let (params, x0) = self.instantiate(c)?;
        integrate_forward(&x0, &params, &self.policy, &self.grid)
    }

    /// Trapezoid integral over the daily grid of the squared deceased misfit
    /// summed over ages; `+inf` when the candidate cannot be simulated.
    pub fn error_functional(&self, c: &Candidate) -> f64 {
        match self.simulate(c) {
            Ok(traj) => misfit(&traj, &self.spec.data.deceased),
            Err(_) => f64::INFINITY,
        }
    }

    /// Bounded Nelder-Mead from the base parameters.
    pub fn least_squares_fit(&self) -> Result<LeastSquaresResult> {
        self.least_squares_from(&self.default_candidate())
    }

    pub fn least_squares_from(&self, start: &Candidate) -> Result<LeastSquaresResult> {
        let (lo, hi) = self.bounds();
        let x0 = self.to_vector(start);
        let cfg = &self.spec.least_squares;
        let objective = |v: &[f64]| self.error_functional(&self.from_vector(v, start));
        let fit = bounded_nelder_mead(objective, &x0, &lo, &hi, cfg)?;
        let names = self.names();
        let at_bounds = fit
            .x
            .iter()
            .enumerate()
            .filter(|(k, v)| {
                let u = (*v - lo[*k]) / (hi[*k] - lo[*k]);
                !(0.01..=0.99).contains(&u)
            })
            .map(|(k, _)| names[k].clone())
            .collect();
        Ok(LeastSquaresResult {
            estimate: self.from_vector(&fit.x, start),
            error: fit.f,
            evaluations: fit.evaluations,
            converged: fit.converged,
            at_bounds,
        })
    }

    /// Likelihood noise scale: RMS of the first differences of the data.
    pub fn noise_scale(&self) -> f64 {
        let (mut acc, mut n) = (0.0, 0usize);
        for series in &self.spec.data.deceased {
            for w in series.windows(2) {
                acc += (w[1] - w[0]).powi(2);
                n += 1;
            }
        }
        let s = (acc / n.max(1) as f64).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Log prior density (up to a constant) with transmission priors centred
    /// at `centre`.
    pub fn log_prior(&self, v: &[f64], centre: &Candidate) -> f64 {
        let p = &self.spec.priors;
        let np = self.spec.n_phases;
        let mut lp = 0.0;
        for k in 0..np {
            let b = v[k];
            if !(b > 0.0 && b <= 1.0) {
                return f64::NEG_INFINITY;
            }
            let sd = p.beta_relative_sd * centre.beta[k];
            lp -= 0.5 * ((b - centre.beta[k]) / sd).powi(2);
        }
        let mut pos = np;
        if self.spec.fit_recovery {
            let t = v[pos];
            if !(t > 0.0) {
                return f64::NEG_INFINITY;
            }
            lp -= 0.5 * (t - p.recovery_mean).powi(2) / p.recovery_variance;
            pos += 1;
        }
        if self.spec.fit_initial && v[pos..].iter().any(|z| !(*z >= p.zeta_low && *z <= p.zeta_high)) {
            return f64::NEG_INFINITY;
        }
        lp
    }

    /// Proposal scales: a fraction of each prior's width (4 standard
    /// deviations for Gaussian priors).
    pub fn proposal_scales(&self, centre: &Candidate) -> Vec<f64> {
        let p = &self.spec.priors;
        let frac = self.spec.chain.proposal_fraction;
        let mut out: Vec<f64> = centre
            .beta
            .iter()
            .map(|b| frac * 4.0 * p.beta_relative_sd * b)
            .collect();
        if self.spec.fit_recovery {
            out.push(frac * 4.0 * p.recovery_variance.sqrt());
        }
        if self.spec.fit_initial {
            out.extend(std::iter::repeat_n(
                frac * (p.zeta_high - p.zeta_low),
                3 * self.base.n_ages(),
            ));
        }
        out
    }

    /// Metropolis-Hastings targeting `exp(-E / (2 s^2))` times the priors,
    /// started at (and with transmission priors centred on) `seed_estimate`.
    pub fn mcmc_sample(&self, seed_estimate: &Candidate) -> Result<Posterior> {
        self.mcmc_sample_with(seed_estimate, &self.spec.chain, true)
    }

    /// As [`Self::mcmc_sample`]; `likelihood = false` samples the priors.
    pub fn mcmc_sample_with(&self, seed_estimate: &Candidate, cfg: &ChainConfig, likelihood: bool) -> Result<Posterior> {
        let start = self.to_vector(seed_estimate);
        if start.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Calibration("seed estimate is not finite".into()));
        }
        let s = self.noise_scale();
        let log_density = |v: &[f64]| {
            let lp = self.log_prior(v, seed_estimate);
            if !lp.is_finite() || !likelihood {
                return lp;
            }
            let e = self.error_functional(&self.from_vector(v, seed_estimate));
            lp - e / (2.0 * s * s)
        };
        let scales = self.proposal_scales(seed_estimate);
        let run = metropolis_hastings(log_density, &start, &scales, cfg)?;
        Ok(summarize(self.names(), run, s))
    }

    /// Independent chains, one per seed, run concurrently.
    pub fn mcmc_replicates(&self, seed_estimate: &Candidate, seeds: &[u64]) -> Result<Vec<Posterior>> {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = ChainConfig {
                    seed,
                    ..self.spec.chain.clone()
                };
                self.mcmc_sample_with(seed_estimate, &cfg, true)
            })
            .collect()
    }
}

/// Trapezoid-in-time sum of squared differences between simulated and
/// observed cumulative deceased.
pub fn misfit(traj: &Trajectory, data: &[Vec<f64>]) -> f64 {
    let days: Vec<&EpiState> = traj.daily().collect();
    let last = days.len() - 1;
    let mut total = 0.0;
    for (d, state) in days.iter().enumerate() {
        let w = if d == 0 || d == last { 0.5 } else { 1.0 };
        for (i, series) in data.iter().enumerate() {
            let Some(obs) = series.get(d) else {
                return f64::INFINITY;
            };
            total += w * (state.blocks()[i][D] - obs).powi(2);
        }
    }
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

/// Observation noise of synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseScale {
    /// Standard deviation in persons.
    Absolute(f64),
    /// Standard deviation as a fraction of each age's final deceased count.
    RelativeToFinal(f64),
}

/// Deceased series of a forward solve with additive Gaussian noise.
pub fn make_synthetic_truth(
    truth: &ModelParams,
    x0: &EpiState,
    policy: &DosingPolicy,
    grid: &GridSpec,
    noise: NoiseScale,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let traj = integrate_forward(x0, truth, policy, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = (0..truth.n_ages())
        .map(|i| traj.daily().map(|x| x.blocks()[i][D]).collect())
        .collect();
    for series in out.iter_mut() {
        let sd = match noise {
            NoiseScale::Absolute(s) => s,
            NoiseScale::RelativeToFinal(f) => f * series.last().copied().unwrap_or(0.0).abs(),
        };
        if sd > 0.0 {
            let normal = Normal::new(0.0, sd).map_err(|e| CoreError::Calibration(e.to_string()))?;
            for v in series.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder-Mead on the box `[lo, hi]`, run in unit-box coordinates with
/// vertices clamped to the box, restarted from the incumbent with a seeded
/// random simplex. `converged` reports whether the last run met the
/// tolerances within its evaluation budget.
pub fn bounded_nelder_mead<F>(
    f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    cfg: &LeastSquaresConfig,
) -> Result<NelderMeadResult>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 || lo.len() != n || hi.len() != n || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(CoreError::Config("malformed search box".into()));
    }
    let to_x = |u: &[f64]| -> Vec<f64> { (0..n).map(|k| lo[k] + u[k] * (hi[k] - lo[k])).collect() };
    let eval = |u: &[f64]| {
        let v = f(&to_x(u));
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let clamp = |u: &mut Vec<f64>| u.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_u: Vec<f64> = (0..n).map(|k| ((x0[k] - lo[k]) / (hi[k] - lo[k])).clamp(0.0, 1.0)).collect();
    let mut best_f = eval(&best_u);
    let mut evaluations = 1;
    let mut converged = false;

    for run in 0..cfg.restarts.max(1) {
        let step = if run == 0 { 0.05 } else { rng.random_range(0.01..0.1) };
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((best_u.clone(), best_f));
        for k in 0..n {
            let mut u = best_u.clone();
            let sign = if run > 0 && rng.random_bool(0.5) { -1.0 } else { 1.0 };
            u[k] += sign * step;
            if u[k] > 1.0 || u[k] < 0.0 {
                u[k] -= 2.0 * sign * step;
            }
            clamp(&mut u);
            let fu = eval(&u);
            simplex.push((u, fu));
        }
        evaluations += n;
        let mut used = n;
        converged = false;
        while used < cfg.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (fb, fw) = (simplex[0].1, simplex[n].1);
            let diameter = simplex[1..]
                .iter()
                .map(|(u, _)| u.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if (fw - fb).abs() <= cfg.ftol * fb.abs().max(f64::MIN_POSITIVE) && diameter <= cfg.xtol.max(1e-15)
                || diameter <= 1e-15
            {
                converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for (u, _) in &simplex[..n] {
                for k in 0..n {
                    centroid[k] += u[k] / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                let mut u: Vec<f64> = (0..n).map(|k| centroid[k] + t * (simplex[n].0[k] - centroid[k])).collect();
                clamp(&mut u);
                u
            };
            let ur = along(-1.0);
            let fr = eval(&ur);
            used += 1;
            if fr < simplex[0].1 {
                let ue = along(-2.0);
                let fe = eval(&ue);
                used += 1;
                simplex[n] = if fe < fr { (ue, fe) } else { (ur, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (ur, fr);
            } else {
                let (uc, fc) = if fr < simplex[n].1 {
                    let u = along(-0.5);
                    let fu = eval(&u);
                    (u, fu)
                } else {
                    let u = along(0.5);
                    let fu = eval(&u);
                    (u, fu)
                };
                used += 1;
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (uc, fc);
                } else {
                    let u0 = simplex[0].0.clone();
                    for (u, fu) in simplex[1..].iter_mut() {
                        for k in 0..n {
                            u[k] = u0[k] + 0.5 * (u[k] - u0[k]);
                        }
                        *fu = eval(u);
                    }
                    used += n;
                }
            }
        }
        evaluations += used - n;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 <= best_f {
            best_u = simplex[0].0.clone();
            best_f = simplex[0].1;
        }
    }
    Ok(NelderMeadResult {
        x: to_x(&best_u),
        f: best_f,
        evaluations,
        converged,
    })
}

/// Raw output of a Metropolis-Hastings run.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Post burn-in draws, `[draw][parameter]`.
    pub draws: Vec<Vec<f64>>,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    /// Proposal scales after adaptation.
    pub scales: Vec<f64>,
}

/// Random-walk Metropolis-Hastings with independent Gaussian proposals.
/// During burn-in the proposal scales are rescaled every `adapt_interval`
/// iterations by `exp(rate - target)`.
pub fn metropolis_hastings<F>(log_density: F, start: &[f64], scales: &[f64], cfg: &ChainConfig) -> Result<ChainOutput>
where
    F: Fn(&[f64]) -> f64,
{
    cfg.validate()?;
    if scales.len() != start.len() || scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(CoreError::Calibration("proposal scales must be finite and non-negative".into()));
    }
    let mut current = start.to_vec();
    let mut current_lp = log_density(&current);
    if !current_lp.is_finite() {
        return Err(CoreError::Calibration("chain start has zero density".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scales = scales.to_vec();
    let burn_in = cfg.burn_in();
    let mut draws = Vec::with_capacity(cfg.samples - burn_in);
    let (mut batch_accepted, mut batch_len, mut kept_accepted) = (0usize, 0usize, 0usize);
    let mut proposal = vec![0.0; start.len()];
    for iter in 0..cfg.samples {
        for (k, p) in proposal.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = current[k] + scales[k] * z;
        }
        let lp = log_density(&proposal);
        let u: f64 = rng.random();
        let accept = lp.is_finite() && (lp >= current_lp || u.ln() < lp - current_lp);
        if accept {
            current.copy_from_slice(&proposal);
            current_lp = lp;
        }
        if iter < burn_in {
            batch_accepted += usize::from(accept);
            batch_len += 1;
            if cfg.adapt_interval > 0 && batch_len == cfg.adapt_interval {
                let rate = batch_accepted as f64 / batch_len as f64;
                let factor = (rate - cfg.target_acceptance).exp();
                scales.iter_mut().for_each(|s| *s *= factor);
                batch_accepted = 0;
                batch_len = 0;
            }
        } else {
            kept_accepted += usize::from(accept);
            draws.push(current.clone());
        }
    }
    let acceptance_rate = kept_accepted as f64 / draws.len().max(1) as f64;
    Ok(ChainOutput {
        draws,
        acceptance_rate,
        scales,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    if k + 1 < sorted.len() {
        sorted[k] + frac * (sorted[k + 1] - sorted[k])
    } else {
        sorted[k]
    }
}

fn summarize(names: Vec<String>, run: ChainOutput, noise_scale: f64) -> Posterior {
    let n = names.len();
    let chains: Vec<Vec<f64>> = (0..n).map(|k| run.draws.iter().map(|d| d[k]).collect()).collect();
    let summaries = names
        .iter()
        .zip(&chains)
        .map(|(name, chain)| {
            let mut sorted = chain.clone();
            sorted.sort_by(f64::total_cmp);
            ParameterSummary {
                name: name.clone(),
                median: quantile(&sorted, 0.5),
                ci_low: quantile(&sorted, 0.025),
                ci_high: quantile(&sorted, 0.975),
            }
        })
        .collect();
    Posterior {
        names,
        chains,
        summaries,
        acceptance_rate: run.acceptance_rate,
        acceptance_warning: !(0.05..=0.6).contains(&run.acceptance_rate),
        noise_scale,
    }
}
