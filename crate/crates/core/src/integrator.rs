//! Fixed-step RK4 for the forward model and for backward adjoint sweeps.

use crate::control::DosingPolicy;
use crate::dynamics::{rhs_into, Forcing};
use crate::error::{CoreError, Result};
use crate::model::{Block, Compartment, EpiState, ModelParams, NEGATIVE_TOLERANCE};
use crate::trajectory::{interpolate_into, GridSpec, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    /// Abort with [`CoreError::NegativeState`] when a state drops below
    /// `-NEGATIVE_TOLERANCE`. Otherwise negatives are only reported through
    /// [`negative_violation`].
    pub strict_nonnegative: bool,
}

pub fn integrate_forward(
    x0: &EpiState,
    params: &ModelParams,
    policy: &DosingPolicy,
    grid: &GridSpec,
) -> Result<Trajectory> {
    integrate_forward_with(x0, params, policy, grid, &ForwardOptions::default())
}

pub fn integrate_forward_with(
    x0: &EpiState,
    params: &ModelParams,
    policy: &DosingPolicy,
    grid: &GridSpec,
    opts: &ForwardOptions,
) -> Result<Trajectory> {
    let n = params.n_ages();
    if x0.n_ages() != n || policy.n_ages() != n {
        return Err(CoreError::Dimension {
            what: "age classes of initial state/policy",
            expected: n,
            got: if x0.n_ages() != n { x0.n_ages() } else { policy.n_ages() },
        });
    }
    if grid.t0 < 0.0 || policy.span_days() < grid.tf {
        return Err(CoreError::Horizon {
            t: grid.tf,
            start: 0.0,
            end: policy.span_days(),
        });
    }
    if !x0.is_finite() {
        return Err(CoreError::NonFinite {
            step: 0,
            age: 0,
            compartment: Compartment::Susceptible,
        });
    }

    let steps = grid.n_steps();
    let h = grid.step;
    let tau = params.onset_delay as f64;
    let mut states: Vec<EpiState> = Vec::with_capacity(steps + 1);
    let mut slope_start: Vec<EpiState> = Vec::with_capacity(steps);
    let mut slope_end: Vec<EpiState> = Vec::with_capacity(steps);
    states.push(x0.clone());

    let mut forcing = Forcing::unforced(n, 0.0);
    let mut k1 = vec![[0.0; 6]; n];
    let mut k2 = vec![[0.0; 6]; n];
    let mut k3 = vec![[0.0; 6]; n];
    let mut k4 = vec![[0.0; 6]; n];
    let mut stage = vec![[0.0; 6]; n];
    let mut delayed = vec![[0.0; 6]; n];

    for k in 0..steps {
        let t = grid.time(k);
        let day = t.floor();
        forcing.beta = params.beta.at(day);
        forcing.detection = params.detection.at(day);
        forcing.severity_active = day >= tau;
        policy.fill_rates(day, &mut forcing.u1, &mut forcing.u2, &mut forcing.ur)?;

        let x = states[k].blocks();
        let delayed_at = |s: f64, out: &mut [Block]| -> Result<()> {
            if forcing.severity_active {
                interpolate_into(grid, &states, &slope_start, &slope_end, s - tau, out)
            } else {
                Ok(())
            }
        };
        delayed_at(t, &mut delayed)?;
        rhs_into(params, &forcing, x, &delayed, &mut k1);
        combine(x, &k1, 0.5 * h, &mut stage);
        delayed_at(t + 0.5 * h, &mut delayed)?;
        rhs_into(params, &forcing, &stage, &delayed, &mut k2);
        combine(x, &k2, 0.5 * h, &mut stage);
        rhs_into(params, &forcing, &stage, &delayed, &mut k3);
        combine(x, &k3, h, &mut stage);
        delayed_at(t + h, &mut delayed)?;
        rhs_into(params, &forcing, &stage, &delayed, &mut k4);

        let mut next = x.to_vec();
        for a in 0..n {
            for c in 0..6 {
                next[a][c] += h / 6.0 * (k1[a][c] + 2.0 * k2[a][c] + 2.0 * k3[a][c] + k4[a][c]);
            }
        }
        let next = EpiState::from_blocks(next);
        check_state(&next, k + 1, opts)?;
        let mut end = vec![[0.0; 6]; n];
        rhs_into(params, &forcing, next.blocks(), &delayed, &mut end);
        slope_start.push(EpiState::from_blocks(k1.clone()));
        slope_end.push(EpiState::from_blocks(end));
        states.push(next);
    }
    Ok(Trajectory::from_parts(*grid, states, slope_start, slope_end))
}

fn combine(x: &[Block], slope: &[Block], h: f64, out: &mut [Block]) {
    for a in 0..x.len() {
        for c in 0..6 {
            out[a][c] = x[a][c] + h * slope[a][c];
        }
    }
}

fn check_state(x: &EpiState, step: usize, opts: &ForwardOptions) -> Result<()> {
    for (age, b) in x.blocks().iter().enumerate() {
        for (c, v) in b.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite {
                    step,
                    age,
                    compartment: Compartment::from_index(c),
                });
            }
            if opts.strict_nonnegative && *v < -NEGATIVE_TOLERANCE {
                return Err(CoreError::NegativeState {
                    step,
                    age,
                    compartment: Compartment::from_index(c),
                    value: *v,
                });
            }
        }
    }
    Ok(())
}

/// First stored state below `-NEGATIVE_TOLERANCE`, as the error it would
/// raise in strict mode.
pub fn negative_violation(traj: &Trajectory) -> Option<CoreError> {
    traj.states().iter().enumerate().find_map(|(step, s)| {
        let (value, age, compartment) = s.min_entry();
        (value < -NEGATIVE_TOLERANCE).then_some(CoreError::NegativeState {
            step,
            age,
            compartment,
            value,
        })
    })
}

/// Read access to the part of a backward solution computed so far.
pub struct BackwardHistory<'a> {
    grid: &'a GridSpec,
    states: &'a [EpiState],
    starts: &'a [EpiState],
    slope_start: &'a [EpiState],
    slope_end: &'a [EpiState],
    /// Steps with index `>= done` are complete.
    done: usize,
}

impl BackwardHistory<'_> {
    /// Costate at `t`, which must lie in a completed step (or at `tf`).
    pub fn at_into(&self, t: f64, out: &mut [Block]) -> Result<()> {
        let grid = self.grid;
        let n = grid.n_steps();
        let pos = (t - grid.t0) / grid.step;
        let k = (pos.floor() as usize).min(n.saturating_sub(1));
        if t > grid.tf || k < self.done || pos < 0.0 {
            if (t - grid.tf).abs() == 0.0 {
                out.copy_from_slice(self.states[n].blocks());
                return Ok(());
            }
            return Err(CoreError::MissingHistory {
                t,
                available: grid.time(self.done),
            });
        }
        self.in_step_into(k, t, out)
    }

    /// Costate at `t` inside the completed step `k`.
    pub fn in_step_into(&self, k: usize, t: f64, out: &mut [Block]) -> Result<()> {
        let grid = self.grid;
        if k < self.done || k >= grid.n_steps() {
            return Err(CoreError::MissingHistory {
                t,
                available: grid.time(self.done),
            });
        }
        let s = (t - grid.time(k)) / grid.step;
        crate::trajectory::hermite(
            self.starts[k].blocks(),
            self.slope_start[k].blocks(),
            self.states[k + 1].blocks(),
            self.slope_end[k].blocks(),
            grid.step,
            s,
            out,
        );
        Ok(())
    }
}

/// Integrates `dp/dt = rhs(step, t, p, history)` backward from
/// `p(tf) = terminal` with RK4 on the reversed clock.
///
/// `step` is the index of the forward step containing `t`, so the callback
/// can use the same step-wise forcing as the forward solve. `jumps` are
/// added to `p` when the sweep passes the given grid times.
pub fn integrate_adjoint<F>(
    grid: &GridSpec,
    terminal: &EpiState,
    jumps: &[(f64, EpiState)],
    mut rhs: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, f64, &[Block], &BackwardHistory<'_>, &mut [Block]) -> Result<()>,
{
    let steps = grid.n_steps();
    let n = terminal.n_ages();
    let h = grid.step;
    let zero = EpiState::zeros(n);
    let mut states = vec![zero.clone(); steps + 1];
    let mut starts = vec![zero.clone(); steps];
    let mut slope_start = vec![zero.clone(); steps];
    let mut slope_end = vec![zero; steps];
    let mut jump_at: Vec<Option<EpiState>> = vec![None; steps + 1];
    for (t, j) in jumps {
        let pos = ((t - grid.t0) / grid.step).round();
        if !(0.0..=steps as f64).contains(&pos) || j.n_ages() != n {
            return Err(CoreError::InvalidGrid(format!("adjoint jump at {t} is off the grid")));
        }
        let slot = &mut jump_at[pos as usize];
        *slot = Some(match slot.take() {
            Some(prev) => prev.axpy(1.0, j),
            None => j.clone(),
        });
    }
    states[steps] = match &jump_at[steps] {
        Some(j) => terminal.axpy(1.0, j),
        None => terminal.clone(),
    };

    let mut k1 = vec![[0.0; 6]; n];
    let mut k2 = vec![[0.0; 6]; n];
    let mut k3 = vec![[0.0; 6]; n];
    let mut k4 = vec![[0.0; 6]; n];
    let mut stage = vec![[0.0; 6]; n];
    let mut start_slope = vec![[0.0; 6]; n];

    for k in (0..steps).rev() {
        let t_end = grid.time(k + 1);
        let t_mid = t_end - 0.5 * h;
        let t_start = grid.time(k);
        let p_end = states[k + 1].blocks().to_vec();
        {
            let hist = BackwardHistory {
                grid,
                states: &states,
                starts: &starts,
                slope_start: &slope_start,
                slope_end: &slope_end,
                done: k + 1,
            };
            rhs(k, t_end, &p_end, &hist, &mut k1)?;
            combine(&p_end, &k1, -0.5 * h, &mut stage);
            rhs(k, t_mid, &stage, &hist, &mut k2)?;
            combine(&p_end, &k2, -0.5 * h, &mut stage);
            rhs(k, t_mid, &stage, &hist, &mut k3)?;
            combine(&p_end, &k3, -h, &mut stage);
            rhs(k, t_start, &stage, &hist, &mut k4)?;
        }
        let mut p_start = p_end.clone();
        for a in 0..n {
            for c in 0..6 {
                p_start[a][c] -= h / 6.0 * (k1[a][c] + 2.0 * k2[a][c] + 2.0 * k3[a][c] + k4[a][c]);
            }
        }
        {
            let hist = BackwardHistory {
                grid,
                states: &states,
                starts: &starts,
                slope_start: &slope_start,
                slope_end: &slope_end,
                done: k + 1,
            };
            rhs(k, t_start, &p_start, &hist, &mut start_slope)?;
        }
        let p_start = EpiState::from_blocks(p_start);
        if !p_start.is_finite() {
            let (age, c) = first_non_finite(&p_start);
            return Err(CoreError::NonFinite {
                step: k,
                age,
                compartment: Compartment::from_index(c),
            });
        }
        slope_end[k] = EpiState::from_blocks(k1.clone());
        slope_start[k] = EpiState::from_blocks(start_slope.clone());
        states[k] = match &jump_at[k] {
            Some(j) => p_start.axpy(1.0, j),
            None => p_start.clone(),
        };
        starts[k] = p_start;
    }
    Ok(Trajectory::from_parts_with_starts(
        *grid,
        states,
        starts,
        slope_start,
        slope_end,
    ))
}

fn first_non_finite(x: &EpiState) -> (usize, usize) {
    for (a, b) in x.blocks().iter().enumerate() {
        for (c, v) in b.iter().enumerate() {
            if !v.is_finite() {
                return (a, c);
            }
        }
    }
    (0, 0)
}
