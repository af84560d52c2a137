//! Objectives, Hamiltonian partials, the backward costate solve and the
//! gradient of an objective with respect to weekly first-dose rates.
//!
//! Sign convention: with `H = p . F - sum_i X_i^2` the costate solves
//! `dp/dt = -dH/dx`, `p(T) = -2 w X(T) dX/dx`, and
//! `dJ/du1_i(t) = -[(p_V - p_S) rho_i](t) - (p_W - p_V)_i(t + delta_w)` for
//! `J = int sum X^2 + w sum X(T)^2`.

use serde::{Deserialize, Serialize};

use crate::control::{DosingPolicy, DAYS_PER_WEEK};
use crate::dynamics::{
    dose_share, dose_share_grad, force_of_infection, hospitalized_from, rhs_into, severity_ratio,
    severity_ratio_grad, Forcing,
};
use crate::error::{CoreError, Result};
use crate::integrator::{integrate_adjoint, integrate_forward};
use crate::model::{Block, EpiState, ModelParams, D, I, N_COMPARTMENTS, R, S, V, W};
use crate::trajectory::{GridSpec, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Deceased,
    Infected,
    Hospitalized,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [
        ObjectiveKind::Deceased,
        ObjectiveKind::Infected,
        ObjectiveKind::Hospitalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Deceased => "deceased",
            ObjectiveKind::Infected => "infected",
            ObjectiveKind::Hospitalized => "hospitalized",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deceased" => Ok(Self::Deceased),
            "infected" => Ok(Self::Infected),
            "hospitalized" => Ok(Self::Hospitalized),
            other => Err(CoreError::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// How the costate sees the running cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    /// Point costs at the trapezoid nodes: the gradient is that of
    /// [`cost_value`] itself.
    #[default]
    Trapezoid,
    /// Continuous running cost `sum X^2` in the Hamiltonian; the gradient
    /// is that of the exact time integral.
    Continuous,
}

/// Cost functional `sum_i int X_i^2 dt + terminal_weight * sum_i X_i(T)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub terminal_weight: f64,
    /// Propagate the costate through the delayed arguments of the fatality
    /// fraction and of the hospitalized count.
    #[serde(default = "yes")]
    pub delayed_adjoint: bool,
    #[serde(default)]
    pub quadrature: Quadrature,
}

fn yes() -> bool {
    true
}

impl Objective {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            terminal_weight: 0.0,
            delayed_adjoint: true,
            quadrature: Quadrature::Trapezoid,
        }
    }

    /// `X_i` of one age block given the state `t_a` days earlier.
    pub fn observable(&self, params: &ModelParams, i: usize, now: &Block, delayed: &Block) -> f64 {
        match self.kind {
            ObjectiveKind::Deceased => now[D],
            ObjectiveKind::Infected => now[I],
            ObjectiveKind::Hospitalized => hospitalized_from(params, i, now, delayed),
        }
    }

    /// `(dX_i/dx_i(t), dX_i/dx_i(t - t_a))`.
    pub fn observable_grad(&self, params: &ModelParams, i: usize, now: &Block, delayed: &Block) -> (Block, Block) {
        let mut cur = [0.0; N_COMPARTMENTS];
        let mut del = [0.0; N_COMPARTMENTS];
        match self.kind {
            ObjectiveKind::Deceased => cur[D] = 1.0,
            ObjectiveKind::Infected => cur[I] = 1.0,
            ObjectiveKind::Hospitalized => {
                let hk = params.hosp_fraction * params.hosp_propensity[i];
                cur[I] = hk * severity_ratio(params, delayed);
                let g = severity_ratio_grad(params, delayed);
                for c in 0..N_COMPARTMENTS {
                    del[c] = hk * now[I] * g[c];
                }
            }
        }
        (cur, del)
    }

    fn uses_delay(&self) -> bool {
        self.kind == ObjectiveKind::Hospitalized
    }
}

/// Observable `X_i` of every class at every grid time, `[step][age]`.
pub fn observable_series(traj: &Trajectory, obj: &Objective, params: &ModelParams) -> Vec<Vec<f64>> {
    let lag = params.onset_delay as usize * traj.grid().steps_per_day();
    let states = traj.states();
    states
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let xd = &states[k.saturating_sub(lag)];
            (0..x.n_ages())
                .map(|i| obj.observable(params, i, &x.blocks()[i], &xd.blocks()[i]))
                .collect()
        })
        .collect()
}

/// Trapezoidal cost over the trajectory grid (plus the weighted terminal
/// term when `terminal_weight != 0`).
pub fn cost_value(traj: &Trajectory, obj: &Objective, params: &ModelParams) -> f64 {
    let series = observable_series(traj, obj, params);
    let sq: Vec<f64> = series.iter().map(|row| row.iter().map(|x| x * x).sum()).collect();
    let h = traj.grid().step;
    let n = sq.len() - 1;
    let inner: f64 = sq[1..n].iter().sum();
    let integral = h * (0.5 * (sq[0] + sq[n]) + inner);
    integral + obj.terminal_weight * sq[n]
}

/// Costate terminal value `-2 X_i(T) dX_i/dx_i(T)` for a unit terminal
/// weight (the slot of the observed compartment for deceased/infected).
pub fn terminal_condition(traj: &Trajectory, obj: &Objective, params: &ModelParams) -> EpiState {
    let (now, delayed) = terminal_pair(traj, params);
    let blocks = (0..now.n_ages())
        .map(|i| {
            let (a, b) = (&now.blocks()[i], &delayed.blocks()[i]);
            let x = obj.observable(params, i, a, b);
            let (g, _) = obj.observable_grad(params, i, a, b);
            g.map(|v| -2.0 * x * v)
        })
        .collect();
    EpiState::from_blocks(blocks)
}

fn terminal_pair<'a>(traj: &'a Trajectory, params: &ModelParams) -> (&'a EpiState, &'a EpiState) {
    let lag = params.onset_delay as usize * traj.grid().steps_per_day();
    let states = traj.states();
    let n = states.len() - 1;
    (&states[n], &states[n.saturating_sub(lag)])
}

/// `H = p . F(x) - sum_i X_i^2`.
pub fn hamiltonian_value(
    params: &ModelParams,
    forcing: &Forcing,
    obj: &Objective,
    x: &[Block],
    delayed: &[Block],
    p: &[Block],
) -> f64 {
    let mut f = vec![[0.0; N_COMPARTMENTS]; x.len()];
    rhs_into(params, forcing, x, delayed, &mut f);
    let mut h = 0.0;
    for i in 0..x.len() {
        for c in 0..N_COMPARTMENTS {
            h += p[i][c] * f[i][c];
        }
        let xi = obj.observable(params, i, &x[i], &delayed[i]);
        h -= xi * xi;
    }
    h
}

/// Partials of the Hamiltonian with respect to the current and the delayed
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPartials {
    pub current: Vec<Block>,
    pub delayed: Vec<Block>,
}

pub fn hamiltonian_partials(
    params: &ModelParams,
    forcing: &Forcing,
    obj: &Objective,
    x: &[Block],
    delayed: &[Block],
    p: &[Block],
) -> HamiltonianPartials {
    partials_with(params, forcing, Some(obj), x, delayed, p)
}

/// Partials of `p . F`, minus the running cost when `obj` is given.
fn partials_with(
    params: &ModelParams,
    forcing: &Forcing,
    obj: Option<&Objective>,
    x: &[Block],
    delayed: &[Block],
    p: &[Block],
) -> HamiltonianPartials {
    let n = x.len();
    let mut cur = vec![[0.0; N_COMPARTMENTS]; n];
    let mut del = vec![[0.0; N_COMPARTMENTS]; n];
    let mut phi = vec![0.0; n];
    force_of_infection(params, forcing.beta, x, &mut phi);
    let pops = params.ages.populations();
    let (sv, sw, g, mu) = (params.sigma_v, params.sigma_w, params.gamma, params.mu_r);

    let mut infection_weight = vec![0.0; n];
    for i in 0..n {
        let (b, q) = (&x[i], &p[i]);
        infection_weight[i] =
            b[S] * (q[I] - q[S]) + sv * b[V] * (q[I] - q[V]) + sw * b[W] * (q[I] - q[W]);
        let (rs, ri) = dose_share_grad(b[S], b[I], forcing.detection);
        let dose_gain = forcing.u1[i] * (q[V] - q[S]);
        let f = if forcing.severity_active {
            params.ifr[i] * severity_ratio(params, &delayed[i])
        } else {
            params.ifr[i]
        };
        let c = &mut cur[i];
        c[S] += phi[i] * (q[I] - q[S]) + dose_gain * rs;
        c[V] += phi[i] * sv * (q[I] - q[V]);
        c[W] += phi[i] * sw * (q[I] - q[W]);
        c[R] += mu * (q[S] - q[R]);
        c[I] += g * (-q[I] + (1.0 - f) * q[R] + f * q[D]) + dose_gain * ri;
        if forcing.severity_active {
            let grad = severity_ratio_grad(params, &delayed[i]);
            let scale = g * b[I] * params.ifr[i] * (q[D] - q[R]);
            for k in 0..N_COMPARTMENTS {
                del[i][k] += scale * grad[k];
            }
        }
        if let Some(obj) = obj {
            let xi = obj.observable(params, i, b, &delayed[i]);
            let (gc, gd) = obj.observable_grad(params, i, b, &delayed[i]);
            for k in 0..N_COMPARTMENTS {
                cur[i][k] -= 2.0 * xi * gc[k];
                del[i][k] -= 2.0 * xi * gd[k];
            }
        }
    }
    for m in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += infection_weight[i] * params.susceptibility[i] * params.contact[i][m] / pops[i];
        }
        cur[m][I] += forcing.beta * acc;
    }
    HamiltonianPartials {
        current: cur,
        delayed: del,
    }
}

/// Per-age gradient with respect to weekly first-dose rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    /// Integral of the gradient density over each day, `[age][day]`.
    pub daily: Vec<Vec<f64>>,
    /// Mean density over each week, `[age][week]`; the derivative of the
    /// cost with respect to `u1[i][j]` is `7 * weekly[i][j]`.
    pub weekly: Vec<Vec<f64>>,
}

impl GradientField {
    /// `dJ/du1[i][j]`.
    pub fn derivative(&self) -> Vec<Vec<f64>> {
        self.weekly
            .iter()
            .map(|row| row.iter().map(|g| DAYS_PER_WEEK * g).collect())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weekly.iter().flatten().all(|v| v.is_finite())
    }
}

/// Forcing used by the forward solve on step `k`.
fn step_forcing(params: &ModelParams, policy: &DosingPolicy, grid: &GridSpec, k: usize) -> Result<Forcing> {
    let day = grid.time(k).floor();
    Forcing::at(params, policy, day)
}

/// Backward costate solve along `forward`.
pub fn solve_adjoint(
    forward: &Trajectory,
    obj: &Objective,
    params: &ModelParams,
    policy: &DosingPolicy,
) -> Result<Trajectory> {
    let grid = *forward.grid();
    let steps = grid.n_steps();
    let spd = grid.steps_per_day();
    let tau = params.onset_delay as f64;
    let lag_steps = params.onset_delay as usize * spd;
    let n = params.n_ages();

    let forcings: Vec<Forcing> = (0..steps)
        .map(|k| step_forcing(params, policy, &grid, k))
        .collect::<Result<_>>()?;

    let continuous = obj.quadrature == Quadrature::Continuous;
    // Point weights of the sampled cost at each grid node.
    let mut node_weights = vec![0.0; steps + 1];
    if !continuous {
        for (k, w) in node_weights.iter_mut().enumerate() {
            *w = if k == 0 || k == steps { 0.5 * grid.step } else { grid.step };
        }
    }
    node_weights[steps] += obj.terminal_weight;

    let states = forward.states();
    let mut jumps = Vec::new();
    for (k, &w) in node_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let now = &states[k];
        let delayed = &states[k.saturating_sub(lag_steps)];
        let mut cur = Vec::with_capacity(n);
        let mut del = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (&now.blocks()[i], &delayed.blocks()[i]);
            let x = obj.observable(params, i, a, b);
            let (gc, gd) = obj.observable_grad(params, i, a, b);
            cur.push(gc.map(|v| -2.0 * w * x * v));
            del.push(gd.map(|v| -2.0 * w * x * v));
        }
        jumps.push((grid.time(k), EpiState::from_blocks(cur)));
        // X at this node also reads x(t_k - t_a) once that lies after t0.
        if obj.uses_delay() && obj.delayed_adjoint && k >= lag_steps {
            jumps.push((grid.time(k - lag_steps), EpiState::from_blocks(del)));
        }
    }
    let terminal = EpiState::zeros(n);
    let running = if continuous { Some(obj) } else { None };

    let mut x = vec![[0.0; N_COMPARTMENTS]; n];
    let mut xd = vec![[0.0; N_COMPARTMENTS]; n];
    let mut xa = vec![[0.0; N_COMPARTMENTS]; n];
    let mut pa = vec![[0.0; N_COMPARTMENTS]; n];

    integrate_adjoint(&grid, &terminal, &jumps, |k, t, p, hist, out| {
        let forcing = &forcings[k];
        forward.in_step_into(k, t, &mut x);
        let need_delayed = forcing.severity_active || (continuous && obj.uses_delay());
        if need_delayed {
            delayed_state(forward, t - tau, &mut xd)?;
        }
        let parts = partials_with(params, forcing, running, &x, &xd, p);
        for i in 0..n {
            for c in 0..N_COMPARTMENTS {
                out[i][c] = -parts.current[i][c];
            }
        }
        // Advanced term: the Hamiltonian at t + t_a reads x(t) through its
        // delayed arguments.
        let ka = k + lag_steps;
        if obj.delayed_adjoint && ka < steps {
            let ta = t + tau;
            forward.in_step_into(ka, ta, &mut xa);
            hist.in_step_into(ka, ta, &mut pa)?;
            let fa = &forcings[ka];
            let adv = partials_with(params, fa, running, &xa, &x, &pa);
            for i in 0..n {
                for c in 0..N_COMPARTMENTS {
                    out[i][c] -= adv.delayed[i][c];
                }
            }
        }
        Ok(())
    })
}

fn delayed_state(traj: &Trajectory, t: f64, out: &mut [Block]) -> Result<()> {
    let grid = traj.grid();
    if t <= grid.t0 {
        out.copy_from_slice(traj.initial().blocks());
        return Ok(());
    }
    let pos = (t - grid.t0) / grid.step;
    let k = (pos.floor() as usize).min(grid.n_steps() - 1);
    traj.in_step_into(k, t, out);
    Ok(())
}

const GAUSS_NODES: [f64; 3] = [
    0.5 - 0.387_298_334_620_741_7,
    0.5,
    0.5 + 0.387_298_334_620_741_7,
];
const GAUSS_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

/// Gradient of the cost with respect to the weekly first-dose rates.
pub fn assemble_gradient(
    forward: &Trajectory,
    adjoint: &Trajectory,
    params: &ModelParams,
    policy: &DosingPolicy,
) -> Result<GradientField> {
    let grid = *forward.grid();
    if adjoint.grid() != &grid {
        return Err(CoreError::InvalidGrid("forward and adjoint grids differ".into()));
    }
    let steps = grid.n_steps();
    let spd = grid.steps_per_day();
    let n = params.n_ages();
    let echo_steps = policy.delta_w as usize * spd;
    let n_days = grid.n_days();
    let first_day = grid.t0.round() as usize;

    let mut daily = vec![vec![0.0; n_days]; n];
    let mut x = vec![[0.0; N_COMPARTMENTS]; n];
    let mut p = vec![[0.0; N_COMPARTMENTS]; n];
    let mut pe = vec![[0.0; N_COMPARTMENTS]; n];
    for k in 0..steps {
        let day = grid.day_of_step(k);
        let detection = params.detection.at(grid.time(k).floor());
        let echo = k + echo_steps;
        for (node, weight) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
            let t = grid.time(k) + node * grid.step;
            forward.in_step_into(k, t, &mut x);
            adjoint.in_step_into(k, t, &mut p);
            let echoed = echo < steps;
            if echoed {
                adjoint.in_step_into(echo, t + policy.delta_w as f64, &mut pe);
            }
            for i in 0..n {
                let rho = dose_share(x[i][S], x[i][I], detection);
                let mut density = -(p[i][V] - p[i][S]) * rho;
                if echoed {
                    density -= pe[i][W] - pe[i][V];
                }
                daily[i][day] += weight * grid.step * density;
            }
        }
    }

    let n_weeks = policy.n_weeks();
    let mut weekly = vec![vec![0.0; n_weeks]; n];
    for i in 0..n {
        for (d, v) in daily[i].iter().enumerate() {
            let week = (first_day + d) / 7;
            if week < n_weeks {
                weekly[i][week] += v / DAYS_PER_WEEK;
            }
        }
    }
    Ok(GradientField { daily, weekly })
}

/// Forward solve, cost, costate and gradient in one pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    pub forward: Trajectory,
    pub adjoint: Trajectory,
    pub gradient: GradientField,
}

pub fn evaluate(
    x0: &EpiState,
    params: &ModelParams,
    policy: &DosingPolicy,
    grid: &GridSpec,
    obj: &Objective,
) -> Result<Evaluation> {
    let forward = integrate_forward(x0, params, policy, grid)?;
    let cost = cost_value(&forward, obj, params);
    let adjoint = solve_adjoint(&forward, obj, params, policy)?;
    let gradient = assemble_gradient(&forward, &adjoint, params, policy)?;
    Ok(Evaluation {
        cost,
        forward,
        adjoint,
        gradient,
    })
}

/// Cost of one policy (forward solve only).
pub fn policy_cost(
    x0: &EpiState,
    params: &ModelParams,
    policy: &DosingPolicy,
    grid: &GridSpec,
    obj: &Objective,
) -> Result<f64> {
    let forward = integrate_forward(x0, params, policy, grid)?;
    Ok(cost_value(&forward, obj, params))
}
