//! Panel data: units, integer periods, event dates and the observation set.
//!
//! A [`Panel`] is immutable after construction. Observations are stored
//! sorted by (unit, period) and addressed by their position, which every
//! other module uses as the observation index.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Date at which a unit first becomes treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventDate {
    Finite(i64),
    NeverTreated,
}

impl EventDate {
    pub fn finite(self) -> Option<i64> {
        match self {
            EventDate::Finite(e) => Some(e),
            EventDate::NeverTreated => None,
        }
    }

    pub fn is_treated_at(self, time: i64) -> bool {
        matches!(self, EventDate::Finite(e) if time >= e)
    }
}

impl Ord for EventDate {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (EventDate::Finite(a), EventDate::Finite(b)) => a.cmp(b),
            (EventDate::Finite(_), EventDate::NeverTreated) => Ordering::Less,
            (EventDate::NeverTreated, EventDate::Finite(_)) => Ordering::Greater,
            (EventDate::NeverTreated, EventDate::NeverTreated) => Ordering::Equal,
        }
    }
}

impl PartialOrd for EventDate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EventDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventDate::Finite(e) => write!(f, "{e}"),
            EventDate::NeverTreated => f.write_str("never"),
        }
    }
}

/// One input row before indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsRecord {
    pub unit: String,
    pub time: i64,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub weight: f64,
    pub dose: Option<f64>,
}

impl ObsRecord {
    pub fn new(unit: impl Into<String>, time: i64, outcome: f64) -> Self {
        ObsRecord {
            unit: unit.into(),
            time,
            outcome,
            covariates: Vec::new(),
            weight: 1.0,
            dose: None,
        }
    }
}

/// An indexed observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub unit: usize,
    pub time: i64,
    /// Position of `time` in [`Panel::periods`].
    pub period: usize,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub weight: f64,
    pub dose: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    units: Vec<String>,
    unit_lookup: HashMap<String, usize>,
    periods: Vec<i64>,
    event_dates: Vec<EventDate>,
    covariate_names: Vec<String>,
    obs: Vec<Observation>,
    lookup: HashMap<(usize, i64), usize>,
}

/// Split of the observation set into untreated and treated observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub untreated: Vec<usize>,
    pub treated: Vec<usize>,
    /// Unit indices per cohort; never-treated units sit under [`EventDate::NeverTreated`].
    pub cohorts: BTreeMap<EventDate, Vec<usize>>,
}

impl Panel {
    /// Builds a validated panel. Units are indexed in order of first appearance.
    pub fn new(
        records: Vec<ObsRecord>,
        event_dates: &HashMap<String, EventDate>,
        covariate_names: Vec<String>,
    ) -> Result<Panel> {
        let mut units = Vec::new();
        let mut unit_lookup = HashMap::new();
        for r in &records {
            if !unit_lookup.contains_key(&r.unit) {
                unit_lookup.insert(r.unit.clone(), units.len());
                units.push(r.unit.clone());
            }
        }
        let mut dates = Vec::with_capacity(units.len());
        for u in &units {
            let e = event_dates.get(u).ok_or_else(|| Error::InconsistentEventDate {
                unit: u.clone(),
                reason: "no event date".into(),
            })?;
            dates.push(*e);
        }
        let mut periods: Vec<i64> = records.iter().map(|r| r.time).collect();
        periods.sort_unstable();
        periods.dedup();

        let ncov = covariate_names.len();
        let mut obs: Vec<Observation> = Vec::with_capacity(records.len());
        for r in records {
            if r.covariates.len() != ncov {
                return Err(Error::DimensionMismatch {
                    expected: ncov,
                    got: r.covariates.len(),
                });
            }
            if !(r.weight.is_finite() && r.weight >= 0.0) {
                return Err(Error::MalformedValue {
                    row: obs.len(),
                    column: "weight".into(),
                    value: r.weight.to_string(),
                });
            }
            let unit = unit_lookup[&r.unit];
            let period = periods.binary_search(&r.time).expect("period indexed");
            obs.push(Observation {
                unit,
                time: r.time,
                period,
                outcome: r.outcome,
                covariates: r.covariates,
                weight: r.weight,
                dose: r.dose,
            });
        }
        obs.sort_by_key(|o| (o.unit, o.time));
        let mut lookup = HashMap::with_capacity(obs.len());
        for (k, o) in obs.iter().enumerate() {
            if lookup.insert((o.unit, o.time), k).is_some() {
                return Err(Error::DuplicateObservation {
                    unit: units[o.unit].clone(),
                    time: o.time,
                });
            }
        }
        Ok(Panel {
            units,
            unit_lookup,
            periods,
            event_dates: dates,
            covariate_names,
            obs,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_key(&self, unit: usize) -> &str {
        &self.units[unit]
    }

    pub fn unit_index(&self, key: &str) -> Result<usize> {
        self.unit_lookup
            .get(key)
            .copied()
            .ok_or_else(|| Error::UnknownUnit(key.to_string()))
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn obs(&self, k: usize) -> &Observation {
        &self.obs[k]
    }

    pub fn event_date(&self, unit: usize) -> EventDate {
        self.event_dates[unit]
    }

    pub fn find(&self, unit: usize, time: i64) -> Option<usize> {
        self.lookup.get(&(unit, time)).copied()
    }

    /// Observation index for a (unit key, period) pair.
    pub fn locate(&self, unit: &str, time: i64) -> Result<usize> {
        let u = self.unit_index(unit)?;
        self.find(u, time).ok_or_else(|| Error::UnknownObservation {
            unit: unit.to_string(),
            time,
        })
    }

    /// Relative time K = t − E for observation `k`; `None` for never-treated units.
    pub fn horizon_of(&self, k: usize) -> Option<i64> {
        let o = &self.obs[k];
        self.event_dates[o.unit].finite().map(|e| o.time - e)
    }

    /// Relative time of (unit, time); `None` for never-treated units.
    pub fn horizon(&self, unit: &str, time: i64) -> Result<Option<i64>> {
        let k = self.locate(unit, time)?;
        Ok(self.horizon_of(k))
    }

    pub fn is_treated(&self, k: usize) -> bool {
        let o = &self.obs[k];
        self.event_dates[o.unit].is_treated_at(o.time)
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.obs.iter().map(|o| o.outcome).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.obs.iter().map(|o| o.weight).collect()
    }

    pub fn has_unit_weights(&self) -> bool {
        self.obs.iter().all(|o| o.weight == 1.0)
    }

    /// Copy of the panel with outcomes replaced (same observation order).
    pub fn with_outcomes(&self, outcomes: &[f64]) -> Result<Panel> {
        if outcomes.len() != self.obs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.obs.len(),
                got: outcomes.len(),
            });
        }
        let mut p = self.clone();
        for (o, &y) in p.obs.iter_mut().zip(outcomes) {
            o.outcome = y;
        }
        Ok(p)
    }

    pub fn partition(&self) -> Partition {
        let mut untreated = Vec::new();
        let mut treated = Vec::new();
        for k in 0..self.obs.len() {
            if self.is_treated(k) {
                treated.push(k);
            } else {
                untreated.push(k);
            }
        }
        let mut cohorts: BTreeMap<EventDate, Vec<usize>> = BTreeMap::new();
        for (u, e) in self.event_dates.iter().enumerate() {
            cohorts.entry(*e).or_default().push(u);
        }
        Partition {
            untreated,
            treated,
            cohorts,
        }
    }

    /// Human-readable label "unit@time" for observation `k`.
    pub fn label(&self, k: usize) -> String {
        let o = &self.obs[k];
        format!("{}@{}", self.units[o.unit], o.time)
    }

    /// Writes the panel as CSV with an `event_time` column (`never` for untreated units).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "unit".to_string(),
            "time".to_string(),
            "outcome".to_string(),
            "event_time".to_string(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        header.push("weight".into());
        header.push("dose".into());
        w.write_record(&header)?;
        for o in &self.obs {
            let mut rec = vec![
                self.units[o.unit].clone(),
                o.time.to_string(),
                format_f64(o.outcome),
                self.event_dates[o.unit].to_string(),
            ];
            rec.extend(o.covariates.iter().map(|&x| format_f64(x)));
            rec.push(format_f64(o.weight));
            rec.push(o.dose.map(format_f64).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Where the event date comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    /// Per-row event date column; empty, `never`, `inf` or `NA` mean never treated.
    EventTime(String),
    /// Absorbing 0/1 treatment indicator; the event date is its first 1.
    Treated(String),
}

/// Column mapping for CSV input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub event: EventSource,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub dose: Option<String>,
}

impl ColumnSchema {
    pub fn new(unit: &str, time: &str, outcome: &str, event: EventSource) -> Self {
        ColumnSchema {
            unit: unit.into(),
            time: time.into(),
            outcome: outcome.into(),
            event,
            covariates: Vec::new(),
            weight: None,
            dose: None,
        }
    }
}

/// What was dropped while loading.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_missing_outcome: usize,
    /// Units with no untreated observation in the data.
    pub dropped_always_treated: Vec<String>,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "." || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn parse_f64(row: usize, column: &str, s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::MalformedValue {
        row,
        column: column.to_string(),
        value: s.to_string(),
    })
}

fn parse_period(row: usize, column: &str, s: &str) -> Result<i64> {
    let t = s.trim();
    if let Ok(v) = t.parse::<i64>() {
        return Ok(v);
    }
    // Accept integral floats such as "3.0".
    match t.parse::<f64>() {
        Ok(x) if x.fract() == 0.0 && x.abs() < 9.0e15 => Ok(x as i64),
        _ => Err(Error::MalformedValue {
            row,
            column: column.to_string(),
            value: s.to_string(),
        }),
    }
}

fn parse_event(row: usize, column: &str, s: &str) -> Result<EventDate> {
    let t = s.trim();
    if is_missing(t)
        || t.eq_ignore_ascii_case("never")
        || t.eq_ignore_ascii_case("inf")
        || t.eq_ignore_ascii_case("+inf")
    {
        return Ok(EventDate::NeverTreated);
    }
    parse_period(row, column, t).map(EventDate::Finite)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Reads a panel from CSV. Rows with a missing outcome are dropped and counted;
/// units that are treated in every observed period are dropped and listed.
pub fn load_panel<R: Read>(source: R, schema: &ColumnSchema) -> Result<(Panel, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let unit_col = column_index(&headers, &schema.unit)?;
    let time_col = column_index(&headers, &schema.time)?;
    let y_col = column_index(&headers, &schema.outcome)?;
    let event_col = match &schema.event {
        EventSource::EventTime(c) | EventSource::Treated(c) => column_index(&headers, c)?,
    };
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let w_col = schema
        .weight
        .as_deref()
        .map(|c| column_index(&headers, c))
        .transpose()?;
    let dose_col = schema
        .dose
        .as_deref()
        .map(|c| column_index(&headers, c))
        .transpose()?;

    let mut report = LoadReport::default();
    let mut records = Vec::new();
    // unit -> (time, raw event field) for every row, including dropped ones
    let mut unit_events: HashMap<String, Vec<(i64, EventDate, Option<bool>)>> = HashMap::new();
    let mut unit_order: Vec<String> = Vec::new();

    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        report.rows_read += 1;
        let unit = rec.get(unit_col).unwrap_or("").trim().to_string();
        let time = parse_period(row, &schema.time, rec.get(time_col).unwrap_or(""))?;
        let raw_event = rec.get(event_col).unwrap_or("");
        let entry = match &schema.event {
            EventSource::EventTime(c) => (time, parse_event(row, c, raw_event)?, None),
            EventSource::Treated(c) => {
                let d = parse_f64(row, c, raw_event)?;
                if d != 0.0 && d != 1.0 {
                    return Err(Error::MalformedValue {
                        row,
                        column: c.clone(),
                        value: raw_event.to_string(),
                    });
                }
                (time, EventDate::NeverTreated, Some(d == 1.0))
            }
        };
        if !unit_events.contains_key(&unit) {
            unit_order.push(unit.clone());
        }
        unit_events.entry(unit.clone()).or_default().push(entry);

        let y_raw = rec.get(y_col).unwrap_or("");
        if is_missing(y_raw) {
            report.dropped_missing_outcome += 1;
            continue;
        }
        let outcome = parse_f64(row, &schema.outcome, y_raw)?;
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_f64(row, name, rec.get(c).unwrap_or("")))
            .collect::<Result<Vec<_>>>()?;
        let weight = match w_col {
            Some(c) => parse_f64(row, schema.weight.as_deref().unwrap(), rec.get(c).unwrap_or(""))?,
            None => 1.0,
        };
        let dose = match dose_col {
            Some(c) => {
                let raw = rec.get(c).unwrap_or("");
                if is_missing(raw) {
                    None
                } else {
                    Some(parse_f64(row, schema.dose.as_deref().unwrap(), raw)?)
                }
            }
            None => None,
        };
        records.push(ObsRecord {
            unit,
            time,
            outcome,
            covariates,
            weight,
            dose,
        });
    }

    let mut event_dates = HashMap::new();
    for unit in &unit_order {
        let mut rows = unit_events.remove(unit).unwrap_or_default();
        rows.sort_by_key(|r| r.0);
        let date = match &schema.event {
            EventSource::EventTime(_) => {
                let first = rows[0].1;
                if rows.iter().any(|r| r.1 != first) {
                    return Err(Error::InconsistentEventDate {
                        unit: unit.clone(),
                        reason: "event date varies across rows".into(),
                    });
                }
                first
            }
            EventSource::Treated(_) => {
                let mut date = EventDate::NeverTreated;
                for r in &rows {
                    let d = r.2.unwrap_or(false);
                    match (date, d) {
                        (EventDate::NeverTreated, true) => date = EventDate::Finite(r.0),
                        (EventDate::Finite(e), false) => {
                            return Err(Error::InconsistentEventDate {
                                unit: unit.clone(),
                                reason: format!(
                                    "treatment switches off at period {} after starting at {e}",
                                    r.0
                                ),
                            })
                        }
                        _ => {}
                    }
                }
                date
            }
        };
        event_dates.insert(unit.clone(), date);
    }

    // Units without any untreated observation carry no information on Y(0).
    let mut first_seen: HashMap<&str, i64> = HashMap::new();
    for r in &records {
        let e = first_seen.entry(r.unit.as_str()).or_insert(r.time);
        *e = (*e).min(r.time);
    }
    let mut always: Vec<String> = unit_order
        .iter()
        .filter(|u| match (event_dates[*u], first_seen.get(u.as_str())) {
            (EventDate::Finite(e), Some(&t0)) => e <= t0,
            _ => false,
        })
        .cloned()
        .collect();
    always.sort();
    if !always.is_empty() {
        log::warn!("dropping {} always-treated unit(s)", always.len());
        records.retain(|r| always.binary_search(&r.unit).is_err());
    }
    report.dropped_always_treated = always;

    let panel = Panel::new(records, &event_dates, schema.covariates.clone())?;
    Ok((panel, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TWO_BY_THREE: &str =
        "unit,time,y,d\nA,1,0,0\nA,2,5,1\nA,3,9,1\nB,1,1,0\nB,2,2,0\nB,3,6,1\n";

    fn load_indicator(csv: &str) -> Result<(Panel, LoadReport)> {
        load_panel(
            csv.as_bytes(),
            &ColumnSchema::new("unit", "time", "y", EventSource::Treated("d".into())),
        )
    }

    #[test]
    fn two_by_three_layout() {
        let (p, rep) = load_indicator(TWO_BY_THREE).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(rep.dropped_missing_outcome, 0);
        let part = p.partition();
        assert_eq!(part.treated.len(), 3);
        let cohorts: Vec<_> = part.cohorts.keys().copied().collect();
        assert_eq!(cohorts, vec![EventDate::Finite(2), EventDate::Finite(3)]);
        let treated: Vec<String> = part.treated.iter().map(|&k| p.label(k)).collect();
        assert_eq!(treated, ["A@2", "A@3", "B@3"]);
        let untreated: Vec<String> = part.untreated.iter().map(|&k| p.label(k)).collect();
        assert_eq!(untreated, ["A@1", "B@1", "B@2"]);
    }

    #[test]
    fn switching_indicator_is_rejected() {
        let csv = "unit,time,y,d\nA,1,0,0\nA,2,1,1\nA,3,2,0\nB,1,0,0\nB,2,0,0\nB,3,0,0\n";
        assert!(matches!(
            load_indicator(csv),
            Err(Error::InconsistentEventDate { .. })
        ));
    }

    #[test]
    fn all_zero_indicator_is_never_treated() {
        let csv = "unit,time,y,d\nA,1,0,0\nA,2,1,1\nA,3,2,1\nC,1,0,0\nC,2,0,0\nC,3,0,0\n";
        let (p, _) = load_indicator(csv).unwrap();
        let c = p.unit_index("C").unwrap();
        assert_eq!(p.event_date(c), EventDate::NeverTreated);
        assert_eq!(p.horizon("C", 2).unwrap(), None);
    }

    #[test]
    fn horizons() {
        let (p, _) = load_indicator(TWO_BY_THREE).unwrap();
        assert_eq!(p.horizon("A", 2).unwrap(), Some(0));
        assert_eq!(p.horizon("A", 1).unwrap(), Some(-1));
        assert!(matches!(p.horizon("A", 7), Err(Error::UnknownObservation { .. })));
    }

    #[test]
    fn duplicates_and_missing_columns() {
        let csv = "unit,time,y,d\nA,1,0,0\nA,1,1,0\n";
        assert!(matches!(
            load_indicator(csv),
            Err(Error::DuplicateObservation { .. })
        ));
        let csv = "unit,period,y,d\nA,1,0,0\n";
        assert!(matches!(load_indicator(csv), Err(Error::MissingColumn(c)) if c == "time"));
    }

    #[test]
    fn missing_outcomes_are_dropped_and_counted() {
        let csv = "unit,time,y,d\nA,1,,0\nA,2,1,1\nA,3,2,1\nB,1,0,0\nB,2,NA,0\nB,3,0,0\n";
        let (p, rep) = load_indicator(csv).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(rep.dropped_missing_outcome, 2);
        // A's only untreated row was dropped, so A is always treated in the data.
        assert_eq!(rep.dropped_always_treated, vec!["A".to_string()]);
    }

    #[test]
    fn event_time_column() {
        let csv = "id,t,y,e\n1,1,0,2\n1,2,0,2\n2,1,0,\n2,2,0,\n3,1,0,inf\n";
        let schema = ColumnSchema::new("id", "t", "y", EventSource::EventTime("e".into()));
        let (p, _) = load_panel(csv.as_bytes(), &schema).unwrap();
        assert_eq!(p.event_date(p.unit_index("1").unwrap()), EventDate::Finite(2));
        assert_eq!(p.event_date(p.unit_index("2").unwrap()), EventDate::NeverTreated);
        assert_eq!(p.event_date(p.unit_index("3").unwrap()), EventDate::NeverTreated);
        let csv = "id,t,y,e\n1,1,0,2\n1,2,0,3\n";
        assert!(matches!(
            load_panel(csv.as_bytes(), &schema),
            Err(Error::InconsistentEventDate { .. })
        ));
    }

    #[test]
    fn never_treated_sorts_last() {
        assert!(EventDate::NeverTreated > EventDate::Finite(i64::MAX));
        assert!(EventDate::Finite(3) < EventDate::Finite(4));
    }

    #[test]
    fn all_never_treated_has_no_treated_set() {
        let csv = "unit,time,y,d\nA,1,0,0\nA,2,1,0\nB,1,0,0\n";
        let (p, _) = load_indicator(csv).unwrap();
        assert!(p.partition().treated.is_empty());
    }
}
