use serde::{Deserialize, Serialize};

use super::metrics::Variant;
use crate::error::{Error, Result};
use crate::prediction::{SubjectForecast, Tuning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChangeGroup {
    Improved,
    Stable,
    Worsened,
}

impl ChangeGroup {
    pub fn classify(delta: f64, tau: f64) -> Self {
        if delta < -tau {
            ChangeGroup::Improved
        } else if delta > tau {
            ChangeGroup::Worsened
        } else {
            ChangeGroup::Stable
        }
    }

    pub fn index(self) -> usize {
        match self {
            ChangeGroup::Improved => 0,
            ChangeGroup::Stable => 1,
            ChangeGroup::Worsened => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeAssignment {
    pub subject: String,
    pub baseline_time: u32,
    pub end_time: u32,
    pub delta_observed: f64,
    pub delta_predicted: f64,
    pub observed: ChangeGroup,
    pub predicted: ChangeGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeGroups {
    pub tau: f64,
    pub variant: Variant,
    pub assignments: Vec<ChangeAssignment>,
    /// Rows are observed groups, columns predicted groups, both ordered
    /// improved, stable, worsened.
    pub confusion: [[usize; 3]; 3],
    pub n_excluded: usize,
}

impl ChangeGroups {
    pub fn observed_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for (i, row) in self.confusion.iter().enumerate() {
            out[i] = row.iter().sum();
        }
        out
    }

    pub fn predicted_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for row in &self.confusion {
            for (j, c) in row.iter().enumerate() {
                out[j] += c;
            }
        }
        out
    }
}

/// Prediction used for change computation. Under the adjusted variant the
/// tuning entry is shifted by the subject offset too, so both endpoints sit
/// on the same adjusted scale.
fn endpoint_prediction(f: &SubjectForecast, idx: usize, variant: Variant) -> Option<f64> {
    let e = &f.entries[idx];
    match variant {
        Variant::Raw => e.y_hat_raw,
        Variant::Adjusted => match f.tuning {
            Tuning::Tuned { time, offset } if time == e.time => e.y_hat_raw.map(|v| v + offset),
            _ => e.y_hat_adjusted,
        },
    }
}

/// Labels observed and predicted change between each subject's earliest and
/// latest observed outcomes by the `tau` rule.
pub fn classify_changes(forecasts: &[SubjectForecast], tau: f64, variant: Variant) -> Result<ChangeGroups> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let mut assignments = Vec::new();
    let mut confusion = [[0usize; 3]; 3];
    let mut n_excluded = 0;
    for f in forecasts {
        let observed: Vec<usize> = (0..f.entries.len()).filter(|&i| f.entries[i].y_observed.is_some()).collect();
        let endpoints = match (observed.first(), observed.last()) {
            (Some(&b), Some(&e)) if b != e => Some((b, e)),
            _ => None,
        };
        let Some((b, e)) = endpoints else {
            n_excluded += 1;
            continue;
        };
        let (Some(pb), Some(pe)) = (endpoint_prediction(f, b, variant), endpoint_prediction(f, e, variant)) else {
            n_excluded += 1;
            continue;
        };
        let yb = f.entries[b].y_observed.expect("filtered");
        let ye = f.entries[e].y_observed.expect("filtered");
        let a = ChangeAssignment {
            subject: f.subject_id.clone(),
            baseline_time: f.entries[b].time,
            end_time: f.entries[e].time,
            delta_observed: ye - yb,
            delta_predicted: pe - pb,
            observed: ChangeGroup::classify(ye - yb, tau),
            predicted: ChangeGroup::classify(pe - pb, tau),
        };
        confusion[a.observed.index()][a.predicted.index()] += 1;
        assignments.push(a);
    }
    Ok(ChangeGroups {
        tau,
        variant,
        assignments,
        confusion,
        n_excluded,
    })
}
