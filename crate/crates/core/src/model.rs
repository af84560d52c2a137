//! Domain types of the SIRDVW model: age classes, the per-age compartment
//! state and the epidemiological/vaccine parameter set.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Number of compartments tracked per age class.
pub const N_COMPARTMENTS: usize = 6;

/// Persons. States below `-NEGATIVE_TOLERANCE` are reported as violations.
pub const NEGATIVE_TOLERANCE: f64 = 1e-6;

/// Persons. Ratio denominators at or below this value are treated as empty.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

/// One age class worth of compartments, indexed by [`Compartment`].
pub type Block = [f64; N_COMPARTMENTS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Compartment {
    Susceptible = 0,
    Infectious = 1,
    Recovered = 2,
    Deceased = 3,
    FirstDose = 4,
    FullyVaccinated = 5,
}

impl Compartment {
    pub const ALL: [Compartment; N_COMPARTMENTS] = [
        Compartment::Susceptible,
        Compartment::Infectious,
        Compartment::Recovered,
        Compartment::Deceased,
        Compartment::FirstDose,
        Compartment::FullyVaccinated,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn symbol(self) -> &'static str {
        match self {
            Compartment::Susceptible => "S",
            Compartment::Infectious => "I",
            Compartment::Recovered => "R",
            Compartment::Deceased => "D",
            Compartment::FirstDose => "V",
            Compartment::FullyVaccinated => "W",
        }
    }

    pub fn from_index(idx: usize) -> Compartment {
        Self::ALL[idx]
    }
}

pub(crate) const S: usize = Compartment::Susceptible as usize;
pub(crate) const I: usize = Compartment::Infectious as usize;
pub(crate) const R: usize = Compartment::Recovered as usize;
pub(crate) const D: usize = Compartment::Deceased as usize;
pub(crate) const V: usize = Compartment::FirstDose as usize;
pub(crate) const W: usize = Compartment::FullyVaccinated as usize;

/// Ordered age classes with their population sizes.
///
/// The production configuration uses the five classes in
/// [`AgeAxis::STANDARD_LABELS`]; reduced axes (one or two classes) are
/// accepted so that small synthetic instances can be built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeAxis {
    labels: Vec<String>,
    populations: Vec<f64>,
}

impl AgeAxis {
    pub const STANDARD_LABELS: [&'static str; 5] = ["0-19", "20-39", "40-59", "60-79", "80+"];

    pub fn new(labels: Vec<String>, populations: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(CoreError::InvalidAges("at least one age class is required".into()));
        }
        if labels.len() != populations.len() {
            return Err(CoreError::Dimension {
                what: "age populations",
                expected: labels.len(),
                got: populations.len(),
            });
        }
        for (idx, label) in labels.iter().enumerate() {
            if labels[..idx].contains(label) {
                return Err(CoreError::InvalidAges(format!("duplicate label `{label}`")));
            }
        }
        if let Some((label, n)) = labels
            .iter()
            .zip(&populations)
            .find(|(_, n)| !(n.is_finite() && **n > 0.0))
        {
            return Err(CoreError::InvalidAges(format!(
                "population of `{label}` must be positive, got {n}"
            )));
        }
        Ok(Self {
            labels,
            populations,
        })
    }

    /// The five-class axis (0-19, 20-39, 40-59, 60-79, 80+).
    pub fn standard(populations: [f64; 5]) -> Result<Self> {
        Self::new(
            Self::STANDARD_LABELS.iter().map(|s| s.to_string()).collect(),
            populations.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_standard(&self) -> bool {
        self.labels.len() == 5
            && self
                .labels
                .iter()
                .zip(Self::STANDARD_LABELS)
                .all(|(a, b)| a == b)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    pub fn population(&self, age: usize) -> f64 {
        self.populations[age]
    }

    pub fn total(&self) -> f64 {
        self.populations.iter().sum()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Compartment values for every age class at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiState {
    blocks: Vec<Block>,
}

impl EpiState {
    pub fn zeros(n_ages: usize) -> Self {
        Self {
            blocks: vec![[0.0; N_COMPARTMENTS]; n_ages],
        }
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    /// Everyone susceptible except `infectious[i]` persons in each class.
    pub fn seeded(ages: &AgeAxis, infectious: &[f64]) -> Self {
        let blocks = ages
            .populations()
            .iter()
            .zip(infectious)
            .map(|(&n, &inf)| {
                let mut b = [0.0; N_COMPARTMENTS];
                b[S] = n - inf;
                b[I] = inf;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn n_ages(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    pub fn get(&self, age: usize, c: Compartment) -> f64 {
        self.blocks[age][c.index()]
    }

    pub fn set(&mut self, age: usize, c: Compartment, value: f64) {
        self.blocks[age][c.index()] = value;
    }

    pub fn class_total(&self, age: usize) -> f64 {
        self.blocks[age].iter().sum()
    }

    /// Sum of one compartment over all age classes.
    pub fn compartment_total(&self, c: Compartment) -> f64 {
        self.blocks.iter().map(|b| b[c.index()]).sum()
    }

    /// Most negative entry, with its location.
    pub fn min_entry(&self) -> (f64, usize, Compartment) {
        let mut best = (f64::INFINITY, 0, Compartment::Susceptible);
        for (age, b) in self.blocks.iter().enumerate() {
            for (k, &v) in b.iter().enumerate() {
                if v < best.0 {
                    best = (v, age, Compartment::from_index(k));
                }
            }
        }
        best
    }

    /// Copy with small negative round-off mapped to zero, for reporting.
    pub fn clamped(&self) -> EpiState {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut out = *b;
                for v in &mut out {
                    if *v < 0.0 && *v >= -NEGATIVE_TOLERANCE {
                        *v = 0.0;
                    }
                }
                out
            })
            .collect();
        EpiState { blocks }
    }

    /// `self + scale * other`.
    pub fn axpy(&self, scale: f64, other: &EpiState) -> EpiState {
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| {
                let mut out = *a;
                for k in 0..N_COMPARTMENTS {
                    out[k] += scale * b[k];
                }
                out
            })
            .collect();
        EpiState { blocks }
    }

    pub fn scaled(&self, scale: f64) -> EpiState {
        let blocks = self
            .blocks
            .iter()
            .map(|a| a.map(|v| v * scale))
            .collect();
        EpiState { blocks }
    }

    pub fn max_abs_diff(&self, other: &EpiState) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }
}

/// A step function of time with fixed-length phases (weekly by default).
/// Times past the last phase read the last value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    pub phase_days: f64,
    pub values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn weekly(values: Vec<f64>) -> Self {
        Self {
            phase_days: 7.0,
            values,
        }
    }

    pub fn constant(value: f64, n_phases: usize) -> Self {
        Self::weekly(vec![value; n_phases.max(1)])
    }

    pub fn phase_of(&self, t: f64) -> usize {
        let idx = (t / self.phase_days).floor();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(self.values.len().saturating_sub(1))
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.values[self.phase_of(t)]
    }

    /// End of the explicitly specified phases.
    pub fn span(&self) -> f64 {
        self.phase_days * self.values.len() as f64
    }

    pub fn covers(&self, t_end: f64) -> bool {
        self.span() >= t_end
    }

    /// Drop the first `days` (a whole number of phases).
    pub fn shifted(&self, days: f64) -> Result<Self> {
        let phases = days / self.phase_days;
        if phases.fract() != 0.0 || phases < 0.0 {
            return Err(CoreError::Config(format!(
                "shift of {days} days is not a whole number of {}-day phases",
                self.phase_days
            )));
        }
        let skip = phases as usize;
        if skip >= self.values.len() {
            return Err(CoreError::Config(format!(
                "shift of {days} days exceeds the series span {}",
                self.span()
            )));
        }
        Ok(Self {
            phase_days: self.phase_days,
            values: self.values[skip..].to_vec(),
        })
    }

    /// Pad with the last value until the series spans `t_end`.
    pub fn extended_to(&self, t_end: f64) -> Self {
        let mut values = self.values.clone();
        let last = values.last().copied().unwrap_or(0.0);
        while self.phase_days * (values.len() as f64) < t_end {
            values.push(last);
        }
        Self {
            phase_days: self.phase_days,
            values,
        }
    }
}

/// Epidemiological and vaccine parameters of the SIRDVW model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub ages: AgeAxis,
    /// Transmission rate per phase (1/day).
    pub beta: PiecewiseConstant,
    /// Recovery rate, the inverse of the mean recovery time (1/day).
    pub gamma: f64,
    /// Per-age susceptibility `r_i`.
    pub susceptibility: Vec<f64>,
    /// Per-age infection fatality rate.
    pub ifr: Vec<f64>,
    pub sigma_v: f64,
    pub sigma_w: f64,
    pub theta_v: f64,
    pub theta_w: f64,
    /// Waning rate of infection-acquired immunity (1/day).
    pub mu_r: f64,
    /// Contact matrix, `contact[i][k]` contacts of class i with class k.
    pub contact: Vec<Vec<f64>>,
    /// Days between inoculation and full vaccine effect on severity.
    pub onset_delay: u32,
    /// Fraction of infections that are detected.
    pub detection: PiecewiseConstant,
    /// Hospitalized fraction `h` of infected.
    pub hosp_fraction: f64,
    /// Per-age propensity `kappa_i` for severe symptoms.
    pub hosp_propensity: Vec<f64>,
}

impl ModelParams {
    /// Parameters of the reference Italian setting (recovery rate,
    /// susceptibilities, IFRs, waning and vaccine effectiveness, 15-day
    /// onset). The contact matrix, transmission phases and hospitalization
    /// coefficients have no reference values and are inputs.
    pub fn reference(
        ages: AgeAxis,
        contact: Vec<Vec<f64>>,
        beta: PiecewiseConstant,
        hosp_fraction: f64,
        hosp_propensity: Vec<f64>,
    ) -> Result<Self> {
        if ages.len() != 5 {
            return Err(CoreError::Dimension {
                what: "reference parameters age classes",
                expected: 5,
                got: ages.len(),
            });
        }
        let params = Self {
            ages,
            beta,
            gamma: 0.07,
            susceptibility: vec![0.33, 1.0, 1.0, 1.0, 1.47],
            ifr: vec![1e-4, 6e-4, 4.5e-3, 2.3e-2, 7.2e-2],
            sigma_v: 0.21,
            sigma_w: 0.21,
            theta_v: 0.20,
            theta_w: 0.037,
            mu_r: 0.006,
            contact,
            onset_delay: 15,
            detection: PiecewiseConstant::constant(1.0, 1),
            hosp_fraction,
            hosp_propensity,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn n_ages(&self) -> usize {
        self.ages.len()
    }

    pub fn recovery_time(&self) -> f64 {
        1.0 / self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ages.len();
        let per_age: [(&'static str, &Vec<f64>); 3] = [
            ("susceptibility", &self.susceptibility),
            ("ifr", &self.ifr),
            ("hosp_propensity", &self.hosp_propensity),
        ];
        for (what, v) in per_age {
            if v.len() != n {
                return Err(CoreError::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(invalid(what, "entries must be finite and non-negative"));
            }
        }
        if self.contact.len() != n || self.contact.iter().any(|row| row.len() != n) {
            return Err(CoreError::Dimension {
                what: "contact matrix rows/columns",
                expected: n,
                got: self.contact.len(),
            });
        }
        if self.contact.iter().flatten().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(invalid("contact", "entries must be finite and non-negative"));
        }
        for (name, v) in [
            ("sigma_v", self.sigma_v),
            ("sigma_w", self.sigma_w),
            ("theta_v", self.theta_v),
            ("theta_w", self.theta_w),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.ifr.iter().any(|&f| f > 1.0) {
            return Err(invalid("ifr", "entries must not exceed 1"));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("mu_r", self.mu_r),
            ("hosp_fraction", self.hosp_fraction),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if self.gamma == 0.0 {
            return Err(invalid("gamma", "must be positive"));
        }
        if self.onset_delay == 0 {
            return Err(invalid("onset_delay", "must be at least one day"));
        }
        if self.beta.values.is_empty() || self.beta.values.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(invalid("beta", "needs at least one finite, non-negative phase"));
        }
        if self.detection.values.is_empty()
            || self
                .detection
                .values
                .iter()
                .any(|d| !(d.is_finite() && *d > 0.0 && *d <= 1.0))
        {
            return Err(invalid("detection", "phases must lie in (0, 1]"));
        }
        if self.beta.phase_days <= 0.0 || self.detection.phase_days <= 0.0 {
            return Err(invalid("phase_days", "must be positive"));
        }
        Ok(())
    }

    /// Parameters seen from `days` later: time-varying series are shifted.
    pub fn shifted(&self, days: f64) -> Result<Self> {
        let mut out = self.clone();
        out.beta = self.beta.shifted(days)?;
        out.detection = if self.detection.values.len() == 1 {
            self.detection.clone()
        } else {
            self.detection.shifted(days)?
        };
        Ok(out)
    }
}

fn invalid(name: &'static str, reason: impl Into<String>) -> CoreError {
    CoreError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_axis_has_five_ordered_classes() {
        let ages = AgeAxis::standard([1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(ages.is_standard());
        assert_eq!(ages.labels()[4], "80+");
        assert_eq!(ages.total(), 15.0);
    }

    #[test]
    fn non_positive_population_rejected() {
        assert!(AgeAxis::standard([1.0, 0.0, 3.0, 4.0, 5.0]).is_err());
        assert!(AgeAxis::new(vec!["a".into()], vec![-1.0]).is_err());
        assert!(AgeAxis::new(vec!["a".into(), "a".into()], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn piecewise_reads_phases_and_holds_last() {
        let p = PiecewiseConstant::weekly(vec![1.0, 2.0, 3.0]);
        assert_eq!(p.at(0.0), 1.0);
        assert_eq!(p.at(6.999), 1.0);
        assert_eq!(p.at(7.0), 2.0);
        assert_eq!(p.at(100.0), 3.0);
        assert!(p.covers(21.0));
        assert!(!p.covers(22.0));
        assert_eq!(p.shifted(7.0).unwrap().values, vec![2.0, 3.0]);
        assert!(p.shifted(3.0).is_err());
        assert_eq!(p.extended_to(35.0).values, vec![1.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn reference_parameters_validate() {
        let ages = AgeAxis::standard([1e7; 5]).unwrap();
        let contact = vec![vec![1.0; 5]; 5];
        let p = ModelParams::reference(
            ages,
            contact,
            PiecewiseConstant::constant(0.05, 3),
            0.1,
            vec![0.1; 5],
        )
        .unwrap();
        assert_eq!(p.onset_delay, 15);
        assert!((p.recovery_time() - 1.0 / 0.07).abs() < 1e-12);

        let mut bad = p.clone();
        bad.sigma_v = 1.2;
        assert!(bad.validate().is_err());
        let mut bad = p.clone();
        bad.contact[0][1] = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = p;
        bad.detection = PiecewiseConstant::constant(0.0, 1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clamped_only_touches_round_off() {
        let s = EpiState::from_blocks(vec![[1.0, -1e-9, -1.0, 0.0, 0.0, 0.0]]);
        let c = s.clamped();
        assert_eq!(c.blocks()[0][1], 0.0);
        assert_eq!(c.blocks()[0][2], -1.0);
    }
}
