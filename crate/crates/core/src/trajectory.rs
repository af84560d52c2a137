//! Time grids and stored solutions.
//!
//! A [`Trajectory`] keeps, next to the states on a uniform grid, the slope of
//! the solution at both ends of every step. Those slopes make the stored
//! solution a piecewise cubic Hermite curve, which is what delayed lookups
//! (`x(t - t_a)` inside RK4 stages) and the adjoint sweep read from. Slopes
//! are one-sided because the forcing (controls, transmission phases) may
//! jump at step boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Block, EpiState, N_COMPARTMENTS};

/// Uniform time grid on `[t0, tf]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t0: f64,
    pub tf: f64,
    pub step: f64,
}

impl GridSpec {
    /// Daily grid; `t0` and `tf` must be whole days.
    pub fn daily(t0: f64, tf: f64) -> Result<Self> {
        Self::with_step(t0, tf, 1.0)
    }

    /// Grid with a sub-daily step. The step must divide one day into a
    /// power-of-two number of pieces so that day boundaries stay on the grid.
    pub fn with_step(t0: f64, tf: f64, step: f64) -> Result<Self> {
        if !(tf > t0) {
            return Err(CoreError::InvalidGrid(format!("tf ({tf}) must exceed t0 ({t0})")));
        }
        if t0.fract() != 0.0 || tf.fract() != 0.0 {
            return Err(CoreError::InvalidGrid("t0 and tf must be whole days".into()));
        }
        let per_day = 1.0 / step;
        if !(step > 0.0 && step <= 1.0) || per_day.fract() != 0.0 || !(per_day as u64).is_power_of_two() {
            return Err(CoreError::InvalidGrid(format!(
                "step {step} must be 1/2^k of a day"
            )));
        }
        Ok(Self { t0, tf, step })
    }

    pub fn n_steps(&self) -> usize {
        ((self.tf - self.t0) / self.step).round() as usize
    }

    pub fn n_days(&self) -> usize {
        (self.tf - self.t0).round() as usize
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.step
    }

    pub fn steps_per_day(&self) -> usize {
        (1.0 / self.step).round() as usize
    }

    /// Day (since `t0`) that owns step `k`.
    pub fn day_of_step(&self, k: usize) -> usize {
        k / self.steps_per_day()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 && t <= self.tf
    }
}

/// Solution stored on a uniform grid together with one-sided step slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    grid: GridSpec,
    states: Vec<EpiState>,
    slope_start: Vec<EpiState>,
    slope_end: Vec<EpiState>,
    /// Values at the start of each step when they differ from `states`
    /// (costates with jumps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    starts: Option<Vec<EpiState>>,
}

impl Trajectory {
    pub(crate) fn from_parts(
        grid: GridSpec,
        states: Vec<EpiState>,
        slope_start: Vec<EpiState>,
        slope_end: Vec<EpiState>,
    ) -> Self {
        debug_assert_eq!(states.len(), grid.n_steps() + 1);
        debug_assert_eq!(slope_start.len(), grid.n_steps());
        debug_assert_eq!(slope_end.len(), grid.n_steps());
        Self {
            grid,
            states,
            slope_start,
            slope_end,
            starts: None,
        }
    }

    pub(crate) fn from_parts_with_starts(
        grid: GridSpec,
        states: Vec<EpiState>,
        starts: Vec<EpiState>,
        slope_start: Vec<EpiState>,
        slope_end: Vec<EpiState>,
    ) -> Self {
        let mut out = Self::from_parts(grid, states, slope_start, slope_end);
        if out.states[..starts.len()] != starts[..] {
            out.starts = Some(starts);
        }
        out
    }

    /// Trajectory from grid samples only; slopes are taken from finite
    /// differences. Intended for externally produced series (tests, imports).
    pub fn from_samples(grid: GridSpec, states: Vec<EpiState>) -> Result<Self> {
        if states.len() != grid.n_steps() + 1 {
            return Err(CoreError::Dimension {
                what: "trajectory samples",
                expected: grid.n_steps() + 1,
                got: states.len(),
            });
        }
        let slopes: Vec<EpiState> = states
            .windows(2)
            .map(|w| w[1].axpy(-1.0, &w[0]).scaled(1.0 / grid.step))
            .collect();
        Ok(Self {
            grid,
            slope_start: slopes.clone(),
            slope_end: slopes,
            states,
            starts: None,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn states(&self) -> &[EpiState] {
        &self.states
    }

    pub fn n_ages(&self) -> usize {
        self.states[0].n_ages()
    }

    pub fn initial(&self) -> &EpiState {
        &self.states[0]
    }

    pub fn last(&self) -> &EpiState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn step_slopes(&self, k: usize) -> (&EpiState, &EpiState) {
        (&self.slope_start[k], &self.slope_end[k])
    }

    /// Value at the start of step `k` (right limit at a jump).
    pub fn step_start(&self, k: usize) -> &EpiState {
        match &self.starts {
            Some(s) => &s[k],
            None => &self.states[k],
        }
    }

    /// Value at `t` inside step `k`, using that step's one-sided data.
    pub fn in_step_into(&self, k: usize, t: f64, out: &mut [Block]) {
        let s = (t - self.grid.time(k)) / self.grid.step;
        hermite(
            self.step_start(k).blocks(),
            self.slope_start[k].blocks(),
            self.states[k + 1].blocks(),
            self.slope_end[k].blocks(),
            self.grid.step,
            s,
            out,
        );
    }

    /// State at whole day `day` after `t0`.
    pub fn state_at_day(&self, day: usize) -> &EpiState {
        &self.states[day * self.grid.steps_per_day()]
    }

    /// Daily samples (`n_days + 1` states).
    pub fn daily(&self) -> impl Iterator<Item = &EpiState> + '_ {
        self.states.iter().step_by(self.grid.steps_per_day())
    }

    /// Solution at an arbitrary time; times before `t0` read the initial
    /// state.
    pub fn at(&self, t: f64) -> Result<EpiState> {
        let mut out = EpiState::zeros(self.n_ages());
        if self.starts.is_some() && t > self.grid.t0 && t < self.grid.tf {
            let k = ((t - self.grid.t0) / self.grid.step).floor() as usize;
            self.in_step_into(k, t, out.blocks_mut());
            return Ok(out);
        }
        interpolate_into(
            &self.grid,
            &self.states,
            &self.slope_start,
            &self.slope_end,
            t,
            out.blocks_mut(),
        )?;
        Ok(out)
    }

    /// Largest relative drift of a per-class total from its initial value.
    pub fn max_conservation_drift(&self) -> f64 {
        let first = &self.states[0];
        let mut worst = 0.0_f64;
        for state in &self.states {
            for age in 0..state.n_ages() {
                let n0 = first.class_total(age);
                let drift = (state.class_total(age) - n0).abs() / n0.abs().max(1.0);
                worst = worst.max(drift);
            }
        }
        worst
    }

    /// Most negative value over the whole run.
    pub fn min_value(&self) -> f64 {
        self.states
            .iter()
            .map(|s| s.min_entry().0)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Hermite interpolation over possibly partially built storage.
///
/// `slope_start`/`slope_end` may be shorter than `states.len() - 1` while a
/// solve is in progress; lookups then have to stay inside completed steps.
pub(crate) fn interpolate_into(
    grid: &GridSpec,
    states: &[EpiState],
    slope_start: &[EpiState],
    slope_end: &[EpiState],
    t: f64,
    out: &mut [Block],
) -> Result<()> {
    if t <= grid.t0 {
        out.copy_from_slice(states[0].blocks());
        return Ok(());
    }
    let pos = (t - grid.t0) / grid.step;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    if frac == 0.0 && k < states.len() {
        out.copy_from_slice(states[k].blocks());
        return Ok(());
    }
    if k >= slope_start.len() || k >= slope_end.len() || k + 1 >= states.len() {
        return Err(CoreError::MissingHistory {
            t,
            available: grid.time(slope_start.len().min(states.len().saturating_sub(1))),
        });
    }
    hermite(
        states[k].blocks(),
        slope_start[k].blocks(),
        states[k + 1].blocks(),
        slope_end[k].blocks(),
        grid.step,
        frac,
        out,
    );
    Ok(())
}

pub(crate) fn hermite(
    x0: &[Block],
    m0: &[Block],
    x1: &[Block],
    m1: &[Block],
    h: f64,
    s: f64,
    out: &mut [Block],
) {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = (s3 - 2.0 * s2 + s) * h;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = (s3 - s2) * h;
    for a in 0..out.len() {
        for c in 0..N_COMPARTMENTS {
            out[a][c] = h00 * x0[a][c] + h10 * m0[a][c] + h01 * x1[a][c] + h11 * m1[a][c];
        }
    }
}
