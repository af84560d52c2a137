//! Right-hand side of the SIRDVW system and the derived per-age quantities
//! (fatality fraction, hospitalized, weighted contacts, detection rate).

use crate::control::DosingPolicy;
use crate::error::{CoreError, Result};
use crate::model::{
    Block, EpiState, ModelParams, PiecewiseConstant, DENOMINATOR_GUARD, D, I, N_COMPARTMENTS, R,
    S, V, W,
};
use crate::trajectory::Trajectory;

/// Lower clamp of the detection rate.
pub const DETECTION_FLOOR: f64 = 1e-3;

/// Everything in the right-hand side that is held fixed over one step.
#[derive(Debug, Clone)]
pub struct Forcing {
    pub beta: f64,
    pub detection: f64,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub ur: Vec<f64>,
    /// Whether the fatality fraction uses the delayed vaccination ratio
    /// (`false` means plain IFR, i.e. inside the onset window).
    pub severity_active: bool,
}

impl Forcing {
    pub fn unforced(n_ages: usize, beta: f64) -> Self {
        Self {
            beta,
            detection: 1.0,
            u1: vec![0.0; n_ages],
            u2: vec![0.0; n_ages],
            ur: vec![0.0; n_ages],
            severity_active: false,
        }
    }

    /// Forcing for the day containing `t`.
    pub fn at(params: &ModelParams, policy: &DosingPolicy, t: f64) -> Result<Self> {
        let day = t.floor();
        let n = params.n_ages();
        let mut forcing = Self::unforced(n, params.beta.at(day));
        forcing.detection = params.detection.at(day);
        forcing.severity_active = day >= params.onset_delay as f64;
        policy.fill_rates(day, &mut forcing.u1, &mut forcing.u2, &mut forcing.ur)?;
        Ok(forcing)
    }
}

/// Share of first doses that reach susceptibles, `S / (S + (1 - delta) I)`.
#[inline]
pub(crate) fn dose_share(s: f64, i: f64, detection: f64) -> f64 {
    let den = s + (1.0 - detection) * i;
    if den <= DENOMINATOR_GUARD {
        0.0
    } else {
        s / den
    }
}

/// Partials of [`dose_share`] with respect to `(S, I)`.
#[inline]
pub(crate) fn dose_share_grad(s: f64, i: f64, detection: f64) -> (f64, f64) {
    let a = 1.0 - detection;
    let den = s + a * i;
    if den <= DENOMINATOR_GUARD {
        (0.0, 0.0)
    } else {
        let d2 = den * den;
        (a * i / d2, -a * s / d2)
    }
}

/// Vaccine severity ratio `(S + theta_V sigma_V V + theta_W sigma_W W) / (S + sigma_V V + sigma_W W)`
/// of one age block.
#[inline]
pub fn severity_ratio(params: &ModelParams, b: &Block) -> f64 {
    let den = b[S] + params.sigma_v * b[V] + params.sigma_w * b[W];
    if den <= DENOMINATOR_GUARD {
        return 1.0;
    }
    let num = b[S] + params.theta_v * params.sigma_v * b[V] + params.theta_w * params.sigma_w * b[W];
    num / den
}

/// Gradient of [`severity_ratio`] over the block.
pub(crate) fn severity_ratio_grad(params: &ModelParams, b: &Block) -> Block {
    let mut g = [0.0; N_COMPARTMENTS];
    let den = b[S] + params.sigma_v * b[V] + params.sigma_w * b[W];
    if den <= DENOMINATOR_GUARD {
        return g;
    }
    let num = b[S] + params.theta_v * params.sigma_v * b[V] + params.theta_w * params.sigma_w * b[W];
    let d2 = den * den;
    g[S] = (den - num) / d2;
    g[V] = params.sigma_v * (params.theta_v * den - num) / d2;
    g[W] = params.sigma_w * (params.theta_w * den - num) / d2;
    g
}

/// Force of infection per age class.
pub(crate) fn force_of_infection(params: &ModelParams, beta: f64, x: &[Block], out: &mut [f64]) {
    let pops = params.ages.populations();
    for (i, phi) in out.iter_mut().enumerate() {
        let row = &params.contact[i];
        let mut acc = 0.0;
        for (k, b) in x.iter().enumerate() {
            acc += row[k] * b[I];
        }
        *phi = beta * params.susceptibility[i] * acc / pops[i];
    }
}

/// Evaluates the model derivative into `out`.
///
/// `delayed` holds the state `t_a` days earlier and is read only when
/// `forcing.severity_active` is set.
pub fn rhs_into(
    params: &ModelParams,
    forcing: &Forcing,
    x: &[Block],
    delayed: &[Block],
    out: &mut [Block],
) {
    let n = x.len();
    let mut phi = [0.0; 16];
    let mut phi_heap;
    let phi: &mut [f64] = if n <= 16 {
        &mut phi[..n]
    } else {
        phi_heap = vec![0.0; n];
        &mut phi_heap
    };
    force_of_infection(params, forcing.beta, x, phi);
    let (sv, sw, g, mu) = (params.sigma_v, params.sigma_w, params.gamma, params.mu_r);
    for i in 0..n {
        let b = &x[i];
        let f = if forcing.severity_active {
            params.ifr[i] * severity_ratio(params, &delayed[i])
        } else {
            params.ifr[i]
        };
        let rho = dose_share(b[S], b[I], forcing.detection);
        let first = forcing.u1[i] * rho;
        let inf_s = phi[i] * b[S];
        let inf_v = phi[i] * sv * b[V];
        let inf_w = phi[i] * sw * b[W];
        let outflow = g * b[I];
        let waning = mu * b[R];
        let o = &mut out[i];
        o[S] = -inf_s - first + waning;
        o[I] = inf_s + inf_v + inf_w - outflow;
        o[R] = (1.0 - f) * outflow - forcing.ur[i] - waning;
        o[D] = f * outflow;
        o[V] = -inf_v + first - forcing.u2[i];
        o[W] = -inf_w + forcing.u2[i] + forcing.ur[i];
    }
}

/// Model derivative at time `t`, reading the delayed state from `history`.
pub fn rhs_eval(
    state: &EpiState,
    t: f64,
    params: &ModelParams,
    policy: &DosingPolicy,
    history: &Trajectory,
) -> Result<EpiState> {
    let grid = history.grid();
    if t < grid.t0 || t > grid.tf {
        return Err(CoreError::Horizon {
            t,
            start: grid.t0,
            end: grid.tf,
        });
    }
    let forcing = Forcing::at(params, policy, t)?;
    let delayed = history.at(t - params.onset_delay as f64)?;
    let mut out = EpiState::zeros(state.n_ages());
    rhs_into(params, &forcing, state.blocks(), delayed.blocks(), out.blocks_mut());
    Ok(out)
}

/// Fatality fraction of class `i` at time `t`.
pub fn fatality_fraction(i: usize, t: f64, history: &Trajectory, params: &ModelParams) -> Result<f64> {
    let ta = params.onset_delay as f64;
    if t <= ta {
        return Ok(params.ifr[i]);
    }
    let delayed = history.at(t - ta)?;
    Ok(params.ifr[i] * severity_ratio(params, &delayed.blocks()[i]))
}

/// Hospitalized persons of class `i` at time `t`.
pub fn hospitalized(i: usize, t: f64, history: &Trajectory, params: &ModelParams) -> Result<f64> {
    let now = history.at(t)?;
    let delayed = history.at(t - params.onset_delay as f64)?;
    Ok(hospitalized_from(params, i, &now.blocks()[i], &delayed.blocks()[i]))
}

#[inline]
pub(crate) fn hospitalized_from(params: &ModelParams, i: usize, now: &Block, delayed: &Block) -> f64 {
    params.hosp_fraction * params.hosp_propensity[i] * now[I] * severity_ratio(params, delayed)
}

/// Contact matrix with column `k` scaled by `r_k`, normalized to a unit
/// max entry.
pub fn weighted_contact_matrix(params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    let mut m: Vec<Vec<f64>> = params
        .contact
        .iter()
        .map(|row| {
            row.iter()
                .zip(&params.susceptibility)
                .map(|(c, r)| c * r)
                .collect()
        })
        .collect();
    let max = m.iter().flatten().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if max == 0.0 {
        return Err(CoreError::ZeroContact);
    }
    for v in m.iter_mut().flatten() {
        *v /= max;
    }
    Ok(m)
}

/// Population-weighted mean IFR.
pub fn aggregate_ifr(params: &ModelParams) -> f64 {
    let pops = params.ages.populations();
    let total: f64 = pops.iter().sum();
    pops.iter().zip(&params.ifr).map(|(n, f)| n * f).sum::<f64>() / total
}

/// Detection rate from a case fatality ratio series, clamped to
/// `[DETECTION_FLOOR, 1]`; phases follow the series.
pub fn detection_rate(cfr: &PiecewiseConstant, params: &ModelParams) -> Result<PiecewiseConstant> {
    if cfr.values.is_empty() {
        return Err(CoreError::EmptySeries("case fatality ratio"));
    }
    if let Some(bad) = cfr.values.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(CoreError::InvalidParameter {
            name: "cfr",
            reason: format!("entries must be positive, got {bad}"),
        });
    }
    let ifr = aggregate_ifr(params);
    Ok(PiecewiseConstant {
        phase_days: cfr.phase_days,
        values: cfr
            .values
            .iter()
            .map(|c| (ifr / c).clamp(DETECTION_FLOOR, 1.0))
            .collect(),
    })
}
