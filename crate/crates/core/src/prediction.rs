//! Out-of-sample forecasts for new subjects and day-one fine-tuning.
//!
//! Test rows are never imputed: a row with any missing model cell is skipped.
//! The forecasting path reads no outcomes at all; fine-tuning reads a
//! subject's outcomes only up to and including its tuning day. Observed values
//! are attached afterwards for scoring ([`attach_observed`]).

use std::cell::RefCell;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, Observation};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};

pub const SKIP_INCOMPLETE: &str = "incomplete-observation";
pub const UNTUNED_FIRST_DAY: &str = "untuned: first-day-incomplete";
const TUNING_DAY: &str = "tuning-day";

/// Read access to one subject's rows, in time order.
///
/// Prediction code goes through this trait so tests can audit which cells,
/// in particular which outcomes, are touched.
pub trait SubjectRows {
    fn subject_id(&self) -> &str;
    fn n_rows(&self) -> usize;
    fn time(&self, row: usize) -> u32;
    fn features(&self, row: usize) -> &[Option<f64>];
    fn covariates(&self, row: usize) -> &[Option<f64>];
    fn outcome(&self, row: usize) -> Option<f64>;
}

/// A subject's contiguous rows inside a dataset.
#[derive(Debug, Clone, Copy)]
pub struct SubjectSlice<'a> {
    id: &'a str,
    rows: &'a [Observation],
}

impl<'a> SubjectSlice<'a> {
    pub fn new(id: &'a str, rows: &'a [Observation]) -> Self {
        Self { id, rows }
    }

    /// One slice per subject, in dataset order.
    pub fn all(ds: &'a LongitudinalDataset) -> Vec<Self> {
        ds.subject_ranges()
            .into_iter()
            .map(|(id, r)| Self::new(id, &ds.observations()[r]))
            .collect()
    }
}

impl SubjectRows for SubjectSlice<'_> {
    fn subject_id(&self) -> &str {
        self.id
    }
    fn n_rows(&self) -> usize {
        self.rows.len()
    }
    fn time(&self, row: usize) -> u32 {
        self.rows[row].time
    }
    fn features(&self, row: usize) -> &[Option<f64>] {
        &self.rows[row].features
    }
    fn covariates(&self, row: usize) -> &[Option<f64>] {
        &self.rows[row].covariates
    }
    fn outcome(&self, row: usize) -> Option<f64> {
        self.rows[row].outcome
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEntry {
    pub time: u32,
    pub y_hat_raw: Option<f64>,
    pub y_hat_adjusted: Option<f64>,
    pub y_observed: Option<f64>,
    /// Present when the row could not be scored.
    pub skip_reason: Option<String>,
}

impl ForecastEntry {
    pub fn skipped(&self) -> bool {
        self.skip_reason.is_some()
    }
}

/// State of the per-subject offset correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Tuning {
    NotApplied,
    Tuned { time: u32, offset: f64 },
    Untuned { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectForecast {
    pub subject_id: String,
    pub entries: Vec<ForecastEntry>,
    pub tuning: Tuning,
}

impl SubjectForecast {
    pub fn tuning_time(&self) -> Option<u32> {
        match self.tuning {
            Tuning::Tuned { time, .. } => Some(time),
            _ => None,
        }
    }

    /// Scored `(y_observed, y_hat)` pairs, raw or adjusted. With
    /// `exclude_tuning_day` the entry consumed for tuning is left out.
    pub fn pairs(&self, adjusted: bool, exclude_tuning_day: bool) -> Vec<(f64, f64)> {
        let tuning_time = if exclude_tuning_day { self.tuning_time() } else { None };
        self.entries
            .iter()
            .filter(|e| Some(e.time) != tuning_time)
            .filter_map(|e| {
                let y_hat = if adjusted { e.y_hat_adjusted } else { e.y_hat_raw };
                Some((e.y_observed?, y_hat?))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    /// Optional `(lo, hi)` range applied to every prediction.
    pub clamp: Option<(f64, f64)>,
}

impl PredictOptions {
    fn apply(&self, v: f64) -> f64 {
        match self.clamp {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        }
    }
}

/// Raw ensemble predictions for every row of one subject. Reads features and
/// covariates only.
pub fn predict_subject<R: SubjectRows + ?Sized>(
    model: &EnsembleModel,
    rows: &R,
    opts: &PredictOptions,
) -> SubjectForecast {
    let entries = (0..rows.n_rows())
        .map(|i| {
            let y_hat = model.predict_row(rows.features(i), rows.covariates(i)).map(|v| opts.apply(v));
            ForecastEntry {
                time: rows.time(i),
                y_hat_raw: y_hat,
                y_hat_adjusted: None,
                y_observed: None,
                skip_reason: y_hat.is_none().then(|| SKIP_INCOMPLETE.to_string()),
            }
        })
        .collect();
    SubjectForecast {
        subject_id: rows.subject_id().to_string(),
        entries,
        tuning: Tuning::NotApplied,
    }
}

/// The earliest row with both an observed outcome and a raw prediction.
/// Outcomes are read in time order and reading stops at the first hit.
pub fn tuning_observation<R: SubjectRows + ?Sized>(forecast: &SubjectForecast, rows: &R) -> Option<(u32, f64)> {
    for (i, entry) in forecast.entries.iter().enumerate() {
        if entry.y_hat_raw.is_none() {
            continue;
        }
        if let Some(y) = rows.outcome(i) {
            return Some((entry.time, y));
        }
    }
    None
}

/// Adds the day-one residual `y_1 - y_hat_1` to every other predicted entry.
/// The tuning entry itself keeps its raw value.
pub fn fine_tune(forecast: &SubjectForecast, first_observation: Option<(u32, f64)>, opts: &PredictOptions) -> SubjectForecast {
    let mut out = forecast.clone();
    let day_one = first_observation.and_then(|(t, y)| {
        let e = forecast.entries.iter().find(|e| e.time == t)?;
        Some((t, y, e.y_hat_raw?))
    });
    let Some((t1, y1, y_hat1)) = day_one else {
        for e in &mut out.entries {
            e.y_hat_adjusted = None;
        }
        out.tuning = Tuning::Untuned {
            reason: UNTUNED_FIRST_DAY.into(),
        };
        return out;
    };
    let offset = y1 - y_hat1;
    for e in &mut out.entries {
        e.y_hat_adjusted = e.y_hat_raw.map(|raw| if e.time == t1 { raw } else { opts.apply(raw + offset) });
    }
    out.tuning = Tuning::Tuned { time: t1, offset };
    out
}

/// Copies observed outcomes into the forecast for scoring.
pub fn attach_observed<R: SubjectRows + ?Sized>(forecast: &mut SubjectForecast, rows: &R) {
    for (i, e) in forecast.entries.iter_mut().enumerate() {
        e.y_observed = rows.outcome(i);
    }
}

/// Predicts (and optionally fine-tunes) every subject of a test dataset.
pub fn forecast_dataset(
    model: &EnsembleModel,
    test: &LongitudinalDataset,
    fine_tuning: bool,
    opts: &PredictOptions,
) -> Vec<SubjectForecast> {
    SubjectSlice::all(test)
        .iter()
        .map(|rows| forecast_subject(model, rows, fine_tuning, opts))
        .collect()
}

/// Records every outcome read made through it.
pub struct OutcomeAudit<'r, R: ?Sized> {
    inner: &'r R,
    reads: RefCell<Vec<usize>>,
}

impl<'r, R: SubjectRows + ?Sized> OutcomeAudit<'r, R> {
    pub fn new(inner: &'r R) -> Self {
        Self {
            inner,
            reads: RefCell::new(Vec::new()),
        }
    }

    /// Row indices whose outcome was read, in read order.
    pub fn reads(&self) -> Vec<usize> {
        self.reads.borrow().clone()
    }
}

impl<R: SubjectRows + ?Sized> SubjectRows for OutcomeAudit<'_, R> {
    fn subject_id(&self) -> &str {
        self.inner.subject_id()
    }
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }
    fn time(&self, row: usize) -> u32 {
        self.inner.time(row)
    }
    fn features(&self, row: usize) -> &[Option<f64>] {
        self.inner.features(row)
    }
    fn covariates(&self, row: usize) -> &[Option<f64>] {
        self.inner.covariates(row)
    }
    fn outcome(&self, row: usize) -> Option<f64> {
        self.reads.borrow_mut().push(row);
        self.inner.outcome(row)
    }
}

/// Predict, tune, then attach observations, for one subject.
pub fn forecast_subject<R: SubjectRows + ?Sized>(
    model: &EnsembleModel,
    rows: &R,
    fine_tuning: bool,
    opts: &PredictOptions,
) -> SubjectForecast {
    forecast_subject_audited(model, rows, fine_tuning, opts).0
}

/// As [`forecast_subject`], also returning the outcome rows read before the
/// scoring step.
pub fn forecast_subject_audited<R: SubjectRows + ?Sized>(
    model: &EnsembleModel,
    rows: &R,
    fine_tuning: bool,
    opts: &PredictOptions,
) -> (SubjectForecast, Vec<usize>) {
    let audit = OutcomeAudit::new(rows);
    let raw = predict_subject(model, &audit, opts);
    let mut out = if fine_tuning {
        let first = tuning_observation(&raw, &audit);
        fine_tune(&raw, first, opts)
    } else {
        raw
    };
    let reads = audit.reads();
    attach_observed(&mut out, rows);
    (out, reads)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes forecasts as `subject,time,y_obs,y_hat_raw,y_hat_adj,skipped,reason`.
pub fn write_forecasts_csv<W: Write>(forecasts: &[SubjectForecast], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject", "time", "y_obs", "y_hat_raw", "y_hat_adj", "skipped", "reason"])?;
    for f in forecasts {
        for e in &f.entries {
            let reason = match (&e.skip_reason, &f.tuning) {
                (Some(r), _) => r.clone(),
                (None, Tuning::Tuned { time, .. }) if *time == e.time => TUNING_DAY.into(),
                (None, Tuning::Untuned { reason }) => reason.clone(),
                _ => String::new(),
            };
            w.write_record([
                f.subject_id.clone(),
                e.time.to_string(),
                fmt(e.y_observed),
                fmt(e.y_hat_raw),
                fmt(e.y_hat_adjusted),
                e.skipped().to_string(),
                reason,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_forecasts_csv`].
pub fn read_forecasts_csv<R: Read>(reader: R) -> Result<Vec<SubjectForecast>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<SubjectForecast> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if rec.len() != 7 {
            return Err(Error::Parse {
                row,
                message: format!("expected 7 fields, found {}", rec.len()),
            });
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::Parse {
                row,
                message: format!("`{s}` is not a number"),
            })
        };
        let time: u32 = rec[1].parse().map_err(|_| Error::Parse {
            row,
            message: format!("bad time `{}`", &rec[1]),
        })?;
        let skipped = &rec[5] == "true";
        let reason = rec[6].to_string();
        let entry = ForecastEntry {
            time,
            y_observed: num(&rec[2])?,
            y_hat_raw: num(&rec[3])?,
            y_hat_adjusted: num(&rec[4])?,
            skip_reason: skipped.then(|| reason.clone()),
        };
        let subject = rec[0].to_string();
        if out.last().is_none_or(|f| f.subject_id != subject) {
            out.push(SubjectForecast {
                subject_id: subject,
                entries: Vec::new(),
                tuning: Tuning::NotApplied,
            });
        }
        let f = out.last_mut().expect("pushed above");
        if !skipped && reason == TUNING_DAY {
            let offset = entry.y_observed.zip(entry.y_hat_raw).map_or(0.0, |(y, h)| y - h);
            f.tuning = Tuning::Tuned { time, offset };
        } else if !skipped && reason.starts_with("untuned") {
            f.tuning = Tuning::Untuned { reason };
        }
        f.entries.push(entry);
    }
    Ok(out)
}
