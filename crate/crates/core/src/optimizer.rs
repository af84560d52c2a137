//! Projected gradient descent with Armijo backtracking.
//!
//! Iterates live in normalized coordinates: weekly doses in units of
//! `dose_unit` and cost relative to the cost of the starting policy.

use serde::{Deserialize, Serialize};

use crate::adjoint::{assemble_gradient, cost_value, solve_adjoint, GradientField, Objective};
use crate::control::{project_feasible_with, DosingPolicy, ProjectionOptions, DAYS_PER_WEEK};
use crate::error::{CoreError, Result};
use crate::integrator::integrate_forward;
use crate::model::{EpiState, ModelParams};
use crate::trajectory::{GridSpec, Trajectory};

/// Everything that stays fixed during one optimization.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub params: ModelParams,
    pub x0: EpiState,
    pub grid: GridSpec,
    pub objective: Objective,
    pub projection: ProjectionOptions,
}

impl ControlProblem {
    pub fn new(params: ModelParams, x0: EpiState, grid: GridSpec, objective: Objective) -> Self {
        Self {
            params,
            x0,
            grid,
            objective,
            projection: ProjectionOptions::default(),
        }
    }

    pub fn simulate(&self, policy: &DosingPolicy) -> Result<Trajectory> {
        integrate_forward(&self.x0, &self.params, policy, &self.grid)
    }

    pub fn cost(&self, policy: &DosingPolicy) -> Result<f64> {
        Ok(cost_value(&self.simulate(policy)?, &self.objective, &self.params))
    }

    /// Gradient along an already computed forward trajectory.
    pub fn gradient(&self, policy: &DosingPolicy, forward: &Trajectory) -> Result<GradientField> {
        let adjoint = solve_adjoint(forward, &self.objective, &self.params, policy)?;
        assemble_gradient(forward, &adjoint, &self.params, policy)
    }

    pub fn project(&self, raw: &[Vec<f64>], skeleton: &DosingPolicy) -> Result<DosingPolicy> {
        project_feasible_with(raw, skeleton, &self.projection)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmijoConfig {
    /// Initial step in normalized units.
    pub alpha0: f64,
    pub shrink: f64,
    pub c1: f64,
    pub max_backtracks: usize,
    /// Factor applied to the last accepted step to start the next search;
    /// `1` restarts every search from the previous step, `0` from `alpha0`.
    pub expand: f64,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self {
            alpha0: 1e-2,
            shrink: 0.5,
            c1: 1e-4,
            max_backtracks: 40,
            expand: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    pub tol: f64,
    /// Measure cost changes relative to `max(J0, 1)`.
    pub relative_tol: bool,
    pub max_iters: usize,
    pub armijo: ArmijoConfig,
    /// Doses per normalized unit of weekly doses.
    pub dose_unit: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            tol: 5e-4,
            relative_tol: true,
            max_iters: 5000,
            armijo: ArmijoConfig::default(),
            dose_unit: 1e5,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.armijo;
        let bad = |name: &'static str, reason: &str| {
            Err(CoreError::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if !(self.tol > 0.0) {
            return bad("tol", "must be positive");
        }
        if !(a.shrink > 0.0 && a.shrink < 1.0) {
            return bad("shrink", "must lie in (0, 1)");
        }
        if !(a.c1 > 0.0 && a.c1 < 1.0) {
            return bad("c1", "must lie in (0, 1)");
        }
        if !(a.alpha0 > 0.0) || !(a.expand >= 0.0) {
            return bad("alpha0", "step and expansion must be positive");
        }
        if !(self.dose_unit > 0.0) {
            return bad("dose_unit", "must be positive");
        }
        Ok(())
    }
}

/// Conversion between doses/costs and the normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub dose_unit: f64,
    pub cost_unit: f64,
}

impl Scaling {
    /// Normalized weekly doses from daily rates.
    fn to_z(&self, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let f = DAYS_PER_WEEK / self.dose_unit;
        u.iter().map(|r| r.iter().map(|v| v * f).collect()).collect()
    }

    fn to_u(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let f = self.dose_unit / DAYS_PER_WEEK;
        z.iter().map(|r| r.iter().map(|v| v * f).collect()).collect()
    }

    /// Gradient of the normalized cost in normalized coordinates.
    pub fn direction(&self, g: &GradientField) -> Vec<Vec<f64>> {
        let f = self.dose_unit / self.cost_unit;
        g.weekly.iter().map(|r| r.iter().map(|v| v * f).collect()).collect()
    }
}

/// Outcome of one line search.
#[derive(Debug, Clone)]
pub struct ArmijoStep {
    pub alpha: f64,
    pub backtracks: usize,
    pub policy: DosingPolicy,
    pub trajectory: Trajectory,
    pub cost: f64,
}

/// Largest `alpha0 * shrink^k` with
/// `J(P(z - alpha g)) <= J(z) + c1 <g, P(z - alpha g) - z>` (normalized units).
#[allow(clippy::too_many_arguments)]
pub fn armijo_search(
    policy: &DosingPolicy,
    cost: f64,
    direction: &GradientField,
    problem: &ControlProblem,
    scaling: &Scaling,
    alpha0: f64,
    cfg: &ArmijoConfig,
) -> Result<ArmijoStep> {
    let g = scaling.direction(direction);
    let z = scaling.to_z(&policy.u1);
    let j = cost / scaling.cost_unit;
    let mut alpha = alpha0;
    for backtracks in 0..=cfg.max_backtracks {
        let raw: Vec<Vec<f64>> = z
            .iter()
            .zip(&g)
            .map(|(zr, gr)| zr.iter().zip(gr).map(|(a, b)| a - alpha * b).collect())
            .collect();
        let trial = problem.project(&scaling.to_u(&raw), policy)?;
        let zt = scaling.to_z(&trial.u1);
        let moved = zt
            .iter()
            .flatten()
            .zip(z.iter().flatten())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let size = z.iter().flatten().fold(1.0_f64, |m, v| m.max(v.abs()));
        if backtracks == 0 && moved <= 1e-13 * size {
            // The projected step does not move: stationary point.
            return Ok(ArmijoStep {
                alpha,
                backtracks,
                policy: policy.clone(),
                trajectory: problem.simulate(policy)?,
                cost,
            });
        }
        let decrease: f64 = zt
            .iter()
            .flatten()
            .zip(z.iter().flatten())
            .zip(g.iter().flatten())
            .map(|((a, b), gg)| gg * (a - b))
            .sum();
        let trajectory = problem.simulate(&trial)?;
        let trial_cost = cost_value(&trajectory, &problem.objective, &problem.params);
        if trial_cost / scaling.cost_unit <= j + cfg.c1 * decrease && trial_cost <= cost {
            return Ok(ArmijoStep {
                alpha,
                backtracks,
                policy: trial,
                trajectory,
                cost: trial_cost,
            });
        }
        alpha *= cfg.shrink;
    }
    Err(CoreError::ArmijoFailed {
        backtracks: cfg.max_backtracks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub step: f64,
    pub backtracks: usize,
    /// Largest weekly budget residual of the accepted iterate (doses).
    pub max_residual: f64,
    /// Smallest first-dose rate of the accepted iterate.
    pub min_dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub initial_cost: f64,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub armijo_failed: bool,
    pub scaling: Scaling,
}

impl OptimizationTrace {
    /// Cost sequence starting with the initial cost.
    pub fn costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.records.iter().map(|r| r.cost))
            .collect()
    }

    pub fn final_cost(&self) -> f64 {
        self.records.last().map_or(self.initial_cost, |r| r.cost)
    }

    pub fn is_monotone(&self) -> bool {
        self.costs().windows(2).all(|w| w[1] <= w[0])
    }
}

/// Projected gradient descent from `initial` (projected first if needed).
pub fn pgd_optimize(
    initial: &DosingPolicy,
    problem: &ControlProblem,
    cfg: &PgdConfig,
) -> Result<(DosingPolicy, OptimizationTrace)> {
    cfg.validate()?;
    initial.validate()?;
    let mut policy = if initial.is_feasible() {
        initial.clone()
    } else {
        problem.project(&initial.u1, initial)?
    };
    let mut forward = problem.simulate(&policy)?;
    let mut cost = cost_value(&forward, &problem.objective, &problem.params);
    let initial_cost = cost;
    let scaling = Scaling {
        dose_unit: cfg.dose_unit,
        cost_unit: if initial_cost > 0.0 { initial_cost } else { 1.0 },
    };
    let tol_scale = if cfg.relative_tol { initial_cost.max(1.0) } else { 1.0 };

    let mut trace = OptimizationTrace {
        initial_cost,
        records: Vec::new(),
        converged: false,
        armijo_failed: false,
        scaling,
    };
    let mut alpha = cfg.armijo.alpha0;
    for iteration in 1..=cfg.max_iters {
        let gradient = problem.gradient(&policy, &forward)?;
        if !gradient.is_finite() {
            return Err(CoreError::NonFinite {
                step: iteration,
                age: 0,
                compartment: crate::model::Compartment::Susceptible,
            });
        }
        let step = match armijo_search(&policy, cost, &gradient, problem, &scaling, alpha, &cfg.armijo) {
            Ok(step) => step,
            Err(CoreError::ArmijoFailed { .. }) => {
                trace.armijo_failed = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let change = cost - step.cost;
        trace.records.push(IterationRecord {
            iteration,
            cost: step.cost,
            step: step.alpha,
            backtracks: step.backtracks,
            max_residual: step
                .policy
                .budget_residuals()
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max),
            min_dose: step.policy.u1.iter().flatten().copied().fold(f64::INFINITY, f64::min),
        });
        alpha = if cfg.armijo.expand > 0.0 {
            step.alpha * cfg.armijo.expand
        } else {
            cfg.armijo.alpha0
        };
        policy = step.policy;
        forward = step.trajectory;
        cost = step.cost;
        if change.abs() / tol_scale < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((policy, trace))
}
