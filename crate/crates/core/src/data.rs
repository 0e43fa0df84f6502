//! Longitudinal data model, CSV ingestion and subject-level splitting.
//!
//! Data live in long format: one [`Observation`] per subject-time row. Missing
//! cells are `None` in memory and empty strings on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject-time row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: String,
    /// Ordinal visit index, starting at 1.
    pub time: u32,
    pub features: Vec<Option<f64>>,
    pub covariates: Vec<Option<f64>>,
    pub outcome: Option<f64>,
}

impl Observation {
    /// Number of absent cells over features, covariates and outcome.
    pub fn n_missing(&self) -> usize {
        self.features.iter().filter(|v| v.is_none()).count()
            + self.covariates.iter().filter(|v| v.is_none()).count()
            + usize::from(self.outcome.is_none())
    }
}

/// Column-role map, read from the JSON sidecar next to a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub subject: String,
    pub time: String,
    pub outcome: String,
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Immutable collection of observations, sorted by `(subject, time)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    observations: Vec<Observation>,
    feature_names: Vec<String>,
    covariate_names: Vec<String>,
    outcome_name: String,
}

impl LongitudinalDataset {
    /// Builds a dataset, sorting rows by `(subject, time)` and checking the
    /// row invariants (widths, `time >= 1`, no duplicate visits).
    pub fn new(
        mut observations: Vec<Observation>,
        feature_names: Vec<String>,
        covariate_names: Vec<String>,
        outcome_name: impl Into<String>,
    ) -> Result<Self> {
        let p = feature_names.len();
        let c = covariate_names.len();
        for (i, obs) in observations.iter().enumerate() {
            if obs.features.len() != p {
                return Err(Error::Integrity(format!(
                    "observation {i} has {} features, expected {p}",
                    obs.features.len()
                )));
            }
            if obs.covariates.len() != c {
                return Err(Error::Integrity(format!(
                    "observation {i} has {} covariates, expected {c}",
                    obs.covariates.len()
                )));
            }
            if obs.time < 1 {
                return Err(Error::Integrity(format!(
                    "subject `{}` has time index 0; indices start at 1",
                    obs.subject
                )));
            }
        }
        observations.sort_by(|a, b| a.subject.cmp(&b.subject).then(a.time.cmp(&b.time)));
        for w in observations.windows(2) {
            if w[0].subject == w[1].subject && w[0].time == w[1].time {
                return Err(Error::Integrity(format!(
                    "duplicate observation for subject `{}` at time {}",
                    w[0].subject, w[0].time
                )));
            }
        }
        Ok(Self {
            observations,
            feature_names,
            covariate_names,
            outcome_name: outcome_name.into(),
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Cells per row: features + covariates + outcome.
    pub fn cells_per_row(&self) -> usize {
        self.n_features() + self.n_covariates() + 1
    }

    pub fn n_missing(&self) -> usize {
        self.observations.iter().map(Observation::n_missing).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.n_missing() == 0
    }

    /// Contiguous row range of every subject, in sorted subject order.
    pub fn subject_ranges(&self) -> Vec<(&str, Range<usize>)> {
        let mut out: Vec<(&str, Range<usize>)> = Vec::new();
        for (i, obs) in self.observations.iter().enumerate() {
            match out.last_mut() {
                Some((id, range)) if *id == obs.subject.as_str() => range.end = i + 1,
                _ => out.push((obs.subject.as_str(), i..i + 1)),
            }
        }
        out
    }

    pub fn subjects(&self) -> Vec<&str> {
        self.subject_ranges().into_iter().map(|(id, _)| id).collect()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ranges().len()
    }

    pub fn subject_rows(&self, subject: &str) -> &[Observation] {
        let start = self.observations.partition_point(|o| o.subject.as_str() < subject);
        let end = self.observations.partition_point(|o| o.subject.as_str() <= subject);
        &self.observations[start..end]
    }

    /// Rows belonging to the given subjects.
    pub fn subset(&self, subjects: &BTreeSet<String>) -> Self {
        let observations = self
            .observations
            .iter()
            .filter(|o| subjects.contains(&o.subject))
            .cloned()
            .collect();
        Self {
            observations,
            feature_names: self.feature_names.clone(),
            covariate_names: self.covariate_names.clone(),
            outcome_name: self.outcome_name.clone(),
        }
    }

    /// Same columns, new rows. Rows are re-sorted and re-validated.
    pub fn with_observations(&self, observations: Vec<Observation>) -> Result<Self> {
        Self::new(
            observations,
            self.feature_names.clone(),
            self.covariate_names.clone(),
            self.outcome_name.clone(),
        )
    }

    /// Schema that [`write_csv`](Self::write_csv) produces.
    pub fn schema(&self) -> Schema {
        Schema {
            subject: "subject".into(),
            time: "time".into(),
            outcome: self.outcome_name.clone(),
            features: self.feature_names.clone(),
            covariates: self.covariate_names.clone(),
        }
    }

    /// Writes the dataset in long format with empty cells for missing values.
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject".to_string(), "time".to_string(), self.outcome_name.clone()];
        header.extend(self.feature_names.iter().cloned());
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for obs in &self.observations {
            let mut rec = vec![obs.subject.clone(), obs.time.to_string(), cell(obs.outcome)];
            rec.extend(obs.features.iter().map(|v| cell(*v)));
            rec.extend(obs.covariates.iter().map(|v| cell(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
        row: 1,
        message: format!("column `{name}` named in schema is absent from the header"),
    })
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::Parse {
            row,
            message: format!("column `{column}`: `{s}` is not a finite number"),
        })
}

/// Reads a long-format CSV according to `schema`.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let subject_col = column_index(&headers, &schema.subject)?;
    let time_col = column_index(&headers, &schema.time)?;
    let outcome_col = column_index(&headers, &schema.outcome)?;
    let feature_cols = schema
        .features
        .iter()
        .map(|n| column_index(&headers, n))
        .collect::<Result<Vec<_>>>()?;
    let covariate_cols = schema
        .covariates
        .iter()
        .map(|n| column_index(&headers, n))
        .collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    let mut seen: BTreeMap<(String, u32), usize> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |col: usize| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::Parse {
                row,
                message: format!("row has {} fields, column {} missing", record.len(), col + 1),
            })
        };
        let subject = field(subject_col)?.trim().to_string();
        if subject.is_empty() {
            return Err(Error::Parse {
                row,
                message: "empty subject identifier".into(),
            });
        }
        let time_raw = field(time_col)?.trim();
        let time: u32 = time_raw.parse().ok().filter(|t| *t >= 1).ok_or_else(|| Error::Parse {
            row,
            message: format!("time `{time_raw}` is not a positive integer"),
        })?;
        if let Some(prev) = seen.insert((subject.clone(), time), row) {
            return Err(Error::Integrity(format!(
                "duplicate (subject `{subject}`, time {time}) at rows {prev} and {row}"
            )));
        }
        let outcome = parse_cell(field(outcome_col)?, row, &schema.outcome)?;
        let features = feature_cols
            .iter()
            .zip(&schema.features)
            .map(|(&c, name)| parse_cell(field(c)?, row, name))
            .collect::<Result<Vec<_>>>()?;
        let covariates = covariate_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_cell(field(c)?, row, name))
            .collect::<Result<Vec<_>>>()?;
        observations.push(Observation {
            subject,
            time,
            features,
            covariates,
            outcome,
        });
    }

    let ds = LongitudinalDataset::new(
        observations,
        schema.features.clone(),
        schema.covariates.clone(),
        schema.outcome.clone(),
    )?;
    check_constant_covariates(&ds)?;
    Ok(ds)
}

/// Loads a CSV file; see [`read_csv`].
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), schema)
}

/// Covariates are subject-level: observed values must agree across a subject's rows.
fn check_constant_covariates(ds: &LongitudinalDataset) -> Result<()> {
    for (subject, range) in ds.subject_ranges() {
        let rows = &ds.observations()[range];
        for (j, name) in ds.covariate_names().iter().enumerate() {
            let mut first: Option<f64> = None;
            for obs in rows {
                if let Some(v) = obs.covariates[j] {
                    match first {
                        None => first = Some(v),
                        Some(f) if f != v => {
                            return Err(Error::Integrity(format!(
                                "covariate `{name}` varies within subject `{subject}` ({f} vs {v})"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fraction of absent cells over features, covariates and outcome.
pub fn missing_fraction(ds: &LongitudinalDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Size("missing fraction of an empty dataset".into()));
    }
    let total = ds.len() * ds.cells_per_row();
    Ok(ds.n_missing() as f64 / total as f64)
}

/// Disjoint subject-level train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn train(&self, ds: &LongitudinalDataset) -> LongitudinalDataset {
        ds.subset(&self.train_subjects)
    }

    pub fn test(&self, ds: &LongitudinalDataset) -> LongitudinalDataset {
        ds.subset(&self.test_subjects)
    }
}

/// Shuffles subjects with `seed` and assigns `round(train_fraction * N)` of
/// them to training, keeping at least one subject on each side.
pub fn split_by_subject(ds: &LongitudinalDataset, train_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let subjects: Vec<String> = ds.subjects().into_iter().map(str::to_owned).collect();
    let (train_subjects, test_subjects) = split_ids(subjects, train_fraction, seed)?;
    Ok(SplitSpec {
        train_subjects,
        test_subjects,
        seed,
    })
}

/// The shuffle-and-cut rule behind [`split_by_subject`], for any id list.
pub fn split_ids(mut ids: Vec<String>, train_fraction: f64, seed: u64) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = ids.len();
    if n < 2 {
        return Err(Error::Size(format!("splitting needs at least 2 subjects, found {n}")));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train).into_iter().collect();
    Ok((ids.into_iter().collect(), test))
}
