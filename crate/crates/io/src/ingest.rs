//! Readers for the epidemiological and vaccination CSV files.
//!
//! Epidemiological file: `date,age_class,deceased_cum,infected_detected,recovered_cum`.
//! Vaccination file: `date,age_class,dose1,dose2,dose_recovered`.
//! Dates are ISO-8601 days, age classes come from the standard five labels.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};
use vaxopt_core::AgeAxis;

use crate::error::{IoError, Result};

pub const EPI_COLUMNS: [&str; 5] = ["date", "age_class", "deceased_cum", "infected_detected", "recovered_cum"];
pub const VACCINATION_COLUMNS: [&str; 5] = ["date", "age_class", "dose1", "dose2", "dose_recovered"];

/// Daily per-age series, `[age][day]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiSeries {
    pub start: NaiveDate,
    pub labels: Vec<String>,
    pub deceased: Vec<Vec<f64>>,
    pub infected: Vec<Vec<f64>>,
    pub recovered: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
    /// `(age label, date)` where cumulative deceased decreased.
    pub non_monotone: Vec<(String, NaiveDate)>,
}

impl EpiSeries {
    pub fn n_days(&self) -> usize {
        self.deceased.first().map_or(0, Vec::len)
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Days::new(day as u64)
    }
}

/// Weekly per-age dose rates in doses/day, `[age][week]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaccinationSeries {
    /// Monday of each ISO week.
    pub week_starts: Vec<NaiveDate>,
    pub labels: Vec<String>,
    pub dose1: Vec<Vec<f64>>,
    pub dose2: Vec<Vec<f64>>,
    pub dose_recovered: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl VaccinationSeries {
    pub fn n_weeks(&self) -> usize {
        self.week_starts.len()
    }

    /// Doses administered per week over all ages and dose kinds.
    pub fn weekly_totals(&self) -> Vec<f64> {
        (0..self.n_weeks())
            .map(|w| {
                7.0 * (0..self.labels.len())
                    .map(|i| self.dose1[i][w] + self.dose2[i][w] + self.dose_recovered[i][w])
                    .sum::<f64>()
            })
            .collect()
    }

    /// Index of the ISO week containing `date`.
    pub fn week_index(&self, date: NaiveDate) -> Option<usize> {
        let monday = iso_monday(date);
        self.week_starts.iter().position(|d| *d == monday)
    }
}

pub fn iso_monday(date: NaiveDate) -> NaiveDate {
    date - Days::new(date.weekday().num_days_from_monday() as u64)
}

fn open(path: &Path) -> Result<String> {
    let mut s = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| IoError::file(path, e))?;
    Ok(s)
}

struct Table {
    file: String,
    rows: Vec<(usize, NaiveDate, usize, [Option<f64>; 3])>,
}

fn schema(file: &str, row: usize, column: &str, message: impl Into<String>) -> IoError {
    IoError::Schema {
        file: file.into(),
        row,
        column: column.into(),
        message: message.into(),
    }
}

/// Parses rows of `date,age_class,x,y,z`. Row numbers count the header as
/// row 1. Empty numeric cells are `None`.
fn read_table(file: &str, text: &str, columns: &[&str; 5]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    for (k, want) in columns.iter().enumerate() {
        match headers.get(k) {
            Some(h) if h == *want => {}
            Some(h) => return Err(schema(file, 1, want, format!("expected header `{want}`, found `{h}`"))),
            None => return Err(schema(file, 1, want, "missing column")),
        }
    }
    if headers.len() != columns.len() {
        return Err(schema(file, 1, &headers[columns.len()], "unexpected extra column"));
    }
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| schema(file, row, "", e.to_string()))?;
        if record.len() != columns.len() {
            return Err(schema(file, row, "", format!("expected {} fields, found {}", columns.len(), record.len())));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| schema(file, row, columns[0], format!("bad date `{}`: {e}", &record[0])))?;
        let age = AgeAxis::STANDARD_LABELS
            .iter()
            .position(|l| *l == &record[1])
            .ok_or_else(|| schema(file, row, columns[1], format!("unknown age class `{}`", &record[1])))?;
        let mut values = [None; 3];
        for c in 0..3 {
            let cell = &record[c + 2];
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| schema(file, row, columns[c + 2], format!("not a number: `{cell}`")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(schema(file, row, columns[c + 2], format!("must be finite and non-negative, got {v}")));
            }
            values[c] = Some(v);
        }
        rows.push((row, date, age, values));
    }
    if rows.is_empty() {
        return Err(schema(file, 2, "", "no data rows"));
    }
    Ok(Table {
        file: file.into(),
        rows,
    })
}

pub fn ingest_epi_data(path: &Path) -> Result<EpiSeries> {
    parse_epi(&path.display().to_string(), &open(path)?)
}

/// Epidemiological series from CSV text. Missing days are forward-filled
/// with one warning per affected date; decreasing cumulative deceased are
/// flagged and kept.
pub fn parse_epi(file: &str, text: &str) -> Result<EpiSeries> {
    let table = read_table(file, text, &EPI_COLUMNS)?;
    let mut by_age: BTreeMap<usize, BTreeMap<NaiveDate, [f64; 3]>> = BTreeMap::new();
    for (row, date, age, values) in &table.rows {
        let mut v = [0.0; 3];
        for c in 0..3 {
            v[c] = values[c].ok_or_else(|| schema(&table.file, *row, EPI_COLUMNS[c + 2], "empty cell"))?;
        }
        if by_age.entry(*age).or_default().insert(*date, v).is_some() {
            return Err(schema(&table.file, *row, "date", format!("duplicate row for {date}")));
        }
    }
    let start = table.rows.iter().map(|r| r.1).min().unwrap();
    let end = table.rows.iter().map(|r| r.1).max().unwrap();
    let n_days = (end - start).num_days() as usize + 1;
    let ages: Vec<usize> = by_age.keys().copied().collect();

    let mut series = vec![[vec![0.0; n_days], vec![0.0; n_days], vec![0.0; n_days]]; ages.len()];
    let mut missing: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (a, age) in ages.iter().enumerate() {
        let rows = &by_age[age];
        for day in 0..n_days {
            let date = start + Days::new(day as u64);
            let v = match rows.get(&date) {
                Some(v) => *v,
                None if day == 0 => {
                    return Err(schema(
                        &table.file,
                        0,
                        "date",
                        format!("age class {} has no row on the first date {start}", AgeAxis::STANDARD_LABELS[*age]),
                    ))
                }
                None => {
                    missing.entry(day).or_default().push(AgeAxis::STANDARD_LABELS[*age].to_string());
                    [series[a][0][day - 1], series[a][1][day - 1], series[a][2][day - 1]]
                }
            };
            for c in 0..3 {
                series[a][c][day] = v[c];
            }
        }
    }
    let warnings = missing
        .iter()
        .map(|(day, labels)| {
            format!(
                "{}: no rows for {}; forward-filled",
                start + Days::new(*day as u64),
                labels.join(", ")
            )
        })
        .collect();
    let labels: Vec<String> = ages.iter().map(|a| AgeAxis::STANDARD_LABELS[*a].to_string()).collect();
    let mut non_monotone = Vec::new();
    for (a, label) in labels.iter().enumerate() {
        for day in 1..n_days {
            if series[a][0][day] < series[a][0][day - 1] {
                non_monotone.push((label.clone(), start + Days::new(day as u64)));
            }
        }
    }
    let mut deceased = Vec::new();
    let mut infected = Vec::new();
    let mut recovered = Vec::new();
    for [d, i, r] in series {
        deceased.push(d);
        infected.push(i);
        recovered.push(r);
    }
    Ok(EpiSeries {
        start,
        labels,
        deceased,
        infected,
        recovered,
        warnings,
        non_monotone,
    })
}

pub fn ingest_vaccination_data(path: &Path) -> Result<VaccinationSeries> {
    parse_vaccination(&path.display().to_string(), &open(path)?)
}

/// Vaccination rates from CSV text: daily doses summed per ISO week and
/// divided by 7. All five standard classes are reported; classes without
/// rows and empty cells read as zero with a warning.
pub fn parse_vaccination(file: &str, text: &str) -> Result<VaccinationSeries> {
    let table = read_table(file, text, &VACCINATION_COLUMNS)?;
    let first = iso_monday(table.rows.iter().map(|r| r.1).min().unwrap());
    let last = iso_monday(table.rows.iter().map(|r| r.1).max().unwrap());
    let n_weeks = ((last - first).num_days() / 7) as usize + 1;
    let n_ages = AgeAxis::STANDARD_LABELS.len();
    let mut sums = vec![[vec![0.0; n_weeks], vec![0.0; n_weeks], vec![0.0; n_weeks]]; n_ages];
    let mut seen = vec![false; n_ages];
    let mut days: BTreeMap<(usize, NaiveDate), usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (row, date, age, values) in &table.rows {
        if let Some(prev) = days.insert((*age, *date), *row) {
            return Err(schema(&table.file, *row, "date", format!("duplicate of row {prev}")));
        }
        seen[*age] = true;
        let week = ((iso_monday(*date) - first).num_days() / 7) as usize;
        for c in 0..3 {
            match values[c] {
                Some(v) => sums[*age][c][week] += v,
                None => warnings.push(format!(
                    "row {row}: empty `{}` read as 0",
                    VACCINATION_COLUMNS[c + 2]
                )),
            }
        }
    }
    for (age, s) in seen.iter().enumerate() {
        if !s {
            warnings.push(format!("no rows for age class {}; zero doses", AgeAxis::STANDARD_LABELS[age]));
        }
    }
    let mut dates_per_week: Vec<std::collections::BTreeSet<NaiveDate>> = vec![Default::default(); n_weeks];
    for (_, date) in days.keys() {
        dates_per_week[((iso_monday(*date) - first).num_days() / 7) as usize].insert(*date);
    }
    for (w, dates) in dates_per_week.iter().enumerate() {
        if dates.len() < 7 {
            let monday = first + Days::new(7 * w as u64);
            warnings.push(format!(
                "ISO week {} ({monday}) has {} of 7 days; missing days count as zero",
                monday.iso_week().week(),
                dates.len()
            ));
        }
    }
    let mut dose1 = Vec::with_capacity(n_ages);
    let mut dose2 = Vec::with_capacity(n_ages);
    let mut dose_recovered = Vec::with_capacity(n_ages);
    for [a, b, c] in sums {
        dose1.push(a.into_iter().map(|v| v / 7.0).collect());
        dose2.push(b.into_iter().map(|v| v / 7.0).collect());
        dose_recovered.push(c.into_iter().map(|v| v / 7.0).collect());
    }
    Ok(VaccinationSeries {
        week_starts: (0..n_weeks).map(|w| first + Days::new(7 * w as u64)).collect(),
        labels: AgeAxis::STANDARD_LABELS.iter().map(|s| s.to_string()).collect(),
        dose1,
        dose2,
        dose_recovered,
        warnings,
    })
}
