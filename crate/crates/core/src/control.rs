//! Weekly dosing policies, budget checks and the projection onto the
//! feasible set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DAYS_PER_WEEK: f64 = 7.0;

/// Piecewise-constant weekly dose rates (doses/day), indexed `[age][week]`.
///
/// Second doses are not stored: they repeat the first-dose schedule
/// `delta_w` days later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosingPolicy {
    pub u1: Vec<Vec<f64>>,
    /// Inter-dose delay in days, a positive multiple of 7.
    pub delta_w: u32,
    /// Exogenous doses given to recovered individuals (doses/day).
    pub u_r: Vec<Vec<f64>>,
    /// Weekly dose budget (doses/week).
    pub n_week: Vec<f64>,
    /// Administration capacity (doses/week); infinite when absent.
    #[serde(default = "infinite", with = "capacity")]
    pub n_s: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}

mod capacity {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl DosingPolicy {
    /// Zero first doses and zero recovered doses.
    pub fn zeros(n_ages: usize, n_weeks: usize, delta_w: u32, n_week: Vec<f64>) -> Result<Self> {
        let policy = Self {
            u1: vec![vec![0.0; n_weeks]; n_ages],
            delta_w,
            u_r: vec![vec![0.0; n_weeks]; n_ages],
            n_week,
            n_s: f64::INFINITY,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn n_ages(&self) -> usize {
        self.u1.len()
    }

    pub fn n_weeks(&self) -> usize {
        self.n_week.len()
    }

    /// Second-dose echo in weeks.
    pub fn delay_weeks(&self) -> usize {
        (self.delta_w / 7) as usize
    }

    /// Days covered by the weekly series.
    pub fn span_days(&self) -> f64 {
        self.n_weeks() as f64 * DAYS_PER_WEEK
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_w == 0 || self.delta_w % 7 != 0 {
            return Err(CoreError::InvalidPolicy(format!(
                "delta_w must be a positive multiple of 7 days, got {}",
                self.delta_w
            )));
        }
        let weeks = self.n_weeks();
        if weeks == 0 {
            return Err(CoreError::InvalidPolicy("policy needs at least one week".into()));
        }
        if self.u1.is_empty() || self.u_r.len() != self.u1.len() {
            return Err(CoreError::Dimension {
                what: "policy age rows",
                expected: self.u1.len(),
                got: self.u_r.len(),
            });
        }
        for row in self.u1.iter().chain(&self.u_r) {
            if row.len() != weeks {
                return Err(CoreError::Dimension {
                    what: "policy weeks",
                    expected: weeks,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(CoreError::InvalidPolicy(
                    "dose rates must be finite and non-negative".into(),
                ));
            }
        }
        if self.n_week.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CoreError::InvalidPolicy("weekly budget must be finite and non-negative".into()));
        }
        if !(self.n_s >= 0.0) {
            return Err(CoreError::InvalidPolicy("capacity must be non-negative".into()));
        }
        Ok(())
    }

    fn week_of(&self, t: f64) -> Result<usize> {
        let week = (t / DAYS_PER_WEEK).floor();
        if t < 0.0 || week >= self.n_weeks() as f64 {
            return Err(CoreError::Horizon {
                t,
                start: 0.0,
                end: self.span_days(),
            });
        }
        Ok(week as usize)
    }

    /// Second-dose rate of class `i` in `week`.
    pub fn u2_week(&self, i: usize, week: usize) -> f64 {
        let d = self.delay_weeks();
        if week >= d {
            self.u1[i][week - d]
        } else {
            0.0
        }
    }

    /// `(u1, u2, u_r)` daily rates of class `i` at time `t`.
    pub fn evaluate_control(&self, i: usize, t: f64) -> Result<(f64, f64, f64)> {
        let w = self.week_of(t)?;
        Ok((self.u1[i][w], self.u2_week(i, w), self.u_r[i][w]))
    }

    pub(crate) fn fill_rates(&self, t: f64, u1: &mut [f64], u2: &mut [f64], ur: &mut [f64]) -> Result<()> {
        let w = self.week_of(t)?;
        for i in 0..self.n_ages() {
            u1[i] = self.u1[i][w];
            u2[i] = self.u2_week(i, w);
            ur[i] = self.u_r[i][w];
        }
        Ok(())
    }

    /// Cap on doses in `week`.
    pub fn week_cap(&self, week: usize) -> f64 {
        self.n_s.min(self.n_week[week])
    }

    /// Doses given in each week minus that week's cap; feasible iff all `<= 0`.
    pub fn budget_residuals(&self) -> Vec<f64> {
        (0..self.n_weeks())
            .map(|j| {
                let daily: f64 = (0..self.n_ages())
                    .map(|i| self.u1[i][j] + self.u2_week(i, j) + self.u_r[i][j])
                    .sum();
                DAYS_PER_WEEK * daily - self.week_cap(j)
            })
            .collect()
    }

    pub fn is_feasible(&self) -> bool {
        self.u1.iter().flatten().all(|v| *v >= 0.0) && self.budget_residuals().iter().all(|r| *r <= 0.0)
    }

    /// Copy with `u1` replaced.
    pub fn with_u1(&self, u1: Vec<Vec<f64>>) -> Self {
        Self { u1, ..self.clone() }
    }

    /// Copy spanning `n_weeks`, padding with zero doses and the last budget.
    pub fn extended(&self, n_weeks: usize) -> Self {
        let mut out = self.clone();
        let last = self.n_week.last().copied().unwrap_or(0.0);
        for row in out.u1.iter_mut().chain(out.u_r.iter_mut()) {
            row.resize(n_weeks.max(row.len()), 0.0);
        }
        out.n_week.resize(n_weeks.max(self.n_weeks()), last);
        out
    }

    /// Total first doses per age over the whole schedule.
    pub fn first_doses_by_age(&self) -> Vec<f64> {
        self.u1.iter().map(|row| DAYS_PER_WEEK * row.iter().sum::<f64>()).collect()
    }
}

/// Euclidean projection of `v` onto `{x >= 0, sum(x) <= cap}`.
pub fn simplex_project(v: &[f64], cap: f64) -> Result<Vec<f64>> {
    if !(cap >= 0.0) {
        return Err(CoreError::NegativeCap(cap));
    }
    let mut out: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = out.iter().sum();
    if total <= cap {
        return Ok(out);
    }
    if cap == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut sorted = out.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        cum += x;
        let t = (cum - cap) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for x in &mut out {
        *x = (*x - theta).max(0.0);
    }
    shrink_to(&mut out, cap);
    Ok(out)
}

/// Removes floating-point excess over `cap` from the largest entries.
fn shrink_to(x: &mut [f64], cap: f64) {
    loop {
        let s: f64 = x.iter().sum();
        if s <= cap {
            return;
        }
        let (k, largest) = x
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if largest <= 0.0 {
            return;
        }
        let reduced = (largest - (s - cap)).max(0.0);
        x[k] = if reduced < largest { reduced } else { next_down(largest) };
    }
}

fn next_down(v: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        f64::from_bits(v.to_bits() - 1)
    }
}

/// Stopping rule of the alternating projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOptions {
    /// Largest coordinate change between sweeps, in doses/day.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_sweeps: 100_000,
        }
    }
}

/// Projects raw first-dose rates onto the feasible set of `skeleton`
/// (its budgets, capacity, recovered doses and delay).
pub fn project_feasible(raw: &[Vec<f64>], skeleton: &DosingPolicy) -> Result<DosingPolicy> {
    project_feasible_with(raw, skeleton, &ProjectionOptions::default())
}

pub fn project_feasible_with(
    raw: &[Vec<f64>],
    skeleton: &DosingPolicy,
    opts: &ProjectionOptions,
) -> Result<DosingPolicy> {
    let n_ages = skeleton.n_ages();
    let n_weeks = skeleton.n_weeks();
    if raw.len() != n_ages || raw.iter().any(|r| r.len() != n_weeks) {
        return Err(CoreError::Dimension {
            what: "raw policy",
            expected: n_ages * n_weeks,
            got: raw.iter().map(Vec::len).sum(),
        });
    }
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidPolicy("raw policy has non-finite entries".into()));
    }
    // Caps on first + echoed second doses per week, in doses/day.
    let mut caps = Vec::with_capacity(n_weeks);
    for j in 0..n_weeks {
        let recovered: f64 = (0..n_ages).map(|i| skeleton.u_r[i][j]).sum();
        let needed = DAYS_PER_WEEK * recovered;
        let available = skeleton.week_cap(j);
        if needed > available {
            return Err(CoreError::InfeasibleBudget {
                week: j,
                needed,
                available,
            });
        }
        caps.push(available / DAYS_PER_WEEK - recovered);
    }

    let candidate = skeleton.with_u1(raw.to_vec());
    if candidate.is_feasible() {
        return Ok(candidate);
    }

    let d = skeleton.delay_weeks();
    // Coordinates of week j's constraint: u1[.][j] and u1[.][j-d].
    let members = |j: usize| -> Vec<(usize, usize)> {
        let mut m: Vec<(usize, usize)> = (0..n_ages).map(|i| (i, j)).collect();
        if j >= d {
            m.extend((0..n_ages).map(|i| (i, j - d)));
        }
        m
    };
    let sets: Vec<Vec<(usize, usize)>> = (0..n_weeks).map(members).collect();

    let mut z: Vec<Vec<f64>> = raw.to_vec();
    let mut corrections: Vec<Vec<f64>> = sets.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut buf = Vec::new();
    for _ in 0..opts.max_sweeps {
        let mut change = 0.0_f64;
        for (j, set) in sets.iter().enumerate() {
            buf.clear();
            buf.extend(set.iter().zip(&corrections[j]).map(|(&(i, w), c)| z[i][w] + c));
            let projected = simplex_project(&buf, caps[j])?;
            for (k, &(i, w)) in set.iter().enumerate() {
                corrections[j][k] = buf[k] - projected[k];
                change = change.max((z[i][w] - projected[k]).abs());
                z[i][w] = projected[k];
            }
        }
        if change <= opts.tol {
            break;
        }
    }

    for v in z.iter_mut().flatten() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut policy = skeleton.with_u1(z);
    enforce_budgets(&mut policy, &sets);
    if let Some(exact) = polish(raw, &policy, &sets, &caps) {
        return Ok(exact);
    }
    Ok(policy)
}

/// Exact projection onto the face picked out by the approximate projection
/// `approx`: coordinates near zero are fixed at zero and near-tight weeks
/// hold with equality. Returns `None` unless the result is feasible and no
/// farther from `raw` than `approx`.
fn polish(
    raw: &[Vec<f64>],
    approx: &DosingPolicy,
    sets: &[Vec<(usize, usize)>],
    caps: &[f64],
) -> Option<DosingPolicy> {
    let n_weeks = approx.n_weeks();
    let scale = caps.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
    let eps = 1e-12 * scale;
    let flat = |(i, w): (usize, usize)| i * n_weeks + w;
    let free: Vec<(usize, usize)> = (0..approx.n_ages())
        .flat_map(|i| (0..n_weeks).map(move |w| (i, w)))
        .filter(|&(i, w)| approx.u1[i][w] > eps)
        .collect();
    let mut col = vec![usize::MAX; approx.n_ages() * n_weeks];
    for (k, &c) in free.iter().enumerate() {
        col[flat(c)] = k;
    }

    // Tight weeks whose rows over the free coordinates are independent.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut rows: Vec<(usize, DVector<f64>)> = Vec::new();
    for (j, set) in sets.iter().enumerate() {
        let used: f64 = set.iter().map(|&(i, w)| approx.u1[i][w]).sum();
        if caps[j] - used > eps {
            continue;
        }
        let mut row = DVector::zeros(free.len());
        for &c in set {
            if col[flat(c)] != usize::MAX {
                row[col[flat(c)]] = 1.0;
            }
        }
        let mut r = row.clone();
        for b in &basis {
            let dot = r.dot(b);
            r -= b * dot;
        }
        let norm = r.norm();
        if norm > 1e-9 * row.norm().max(1.0) {
            basis.push(r / norm);
            rows.push((j, row));
        }
    }

    let z = DVector::from_iterator(free.len(), free.iter().map(|&(i, w)| raw[i][w]));
    let mut u = z.clone();
    if !rows.is_empty() {
        let a = DMatrix::from_fn(rows.len(), free.len(), |r, c| rows[r].1[c]);
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|(j, _)| caps[*j]));
        let lambda = (&a * a.transpose()).cholesky()?.solve(&(&a * &z - b));
        u -= a.transpose() * lambda;
        // Close each row on a coordinate no other row touches.
        for (r, (j, row)) in rows.iter().enumerate() {
            let own = (0..free.len()).find(|&c| row[c] != 0.0 && (0..rows.len()).all(|s| s == r || rows[s].1[c] == 0.0));
            if let Some(c) = own {
                let others: f64 = (0..free.len()).filter(|&k| k != c && row[k] != 0.0).map(|k| u[k]).sum();
                u[c] = caps[*j] - others;
            }
        }
    }
    if u.iter().any(|v| !(*v >= 0.0)) {
        return None;
    }

    let mut u1 = vec![vec![0.0; n_weeks]; approx.n_ages()];
    for (k, &(i, w)) in free.iter().enumerate() {
        u1[i][w] = u[k];
    }
    let mut exact = approx.with_u1(u1);
    enforce_budgets(&mut exact, sets);
    let dist = |p: &DosingPolicy| -> f64 {
        p.u1.iter().flatten().zip(raw.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let (d_exact, d_approx) = (dist(&exact), dist(approx));
    if exact.is_feasible() && d_exact <= d_approx * (1.0 + 1e-12) + eps * eps {
        Some(exact)
    } else {
        None
    }
}

/// Trims the largest coordinates of any week still over budget. Trimming
/// only lowers the other weeks' totals, so one pass over the weeks suffices.
fn enforce_budgets(policy: &mut DosingPolicy, sets: &[Vec<(usize, usize)>]) {
    for (j, set) in sets.iter().enumerate() {
        loop {
            let residual = policy.budget_residuals()[j];
            if residual <= 0.0 {
                break;
            }
            let Some(&(i, w)) = set
                .iter()
                .filter(|&&(i, w)| policy.u1[i][w] > 0.0)
                .max_by(|a, b| policy.u1[a.0][a.1].total_cmp(&policy.u1[b.0][b.1]))
            else {
                break;
            };
            let v = policy.u1[i][w];
            let reduced = (v - residual / DAYS_PER_WEEK).max(0.0);
            policy.u1[i][w] = if reduced < v { reduced } else { next_down(v) };
        }
    }
}
