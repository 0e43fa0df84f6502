use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction::SubjectForecast;
use crate::stats;

pub const CORRELATION_UNDEFINED: &str = "correlation-undefined";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Raw,
    Adjusted,
}

impl Variant {
    pub fn is_adjusted(self) -> bool {
        self == Variant::Adjusted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Longitudinal,
    PerSubjectMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub pearson_r: Option<f64>,
    pub spearman_r: Option<f64>,
    pub mse: f64,
    pub n_pairs: usize,
    pub variant: Variant,
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Pearson, Spearman and MSE over `(y_obs, y_hat)` pairs.
pub fn metrics(pairs: &[(f64, f64)], variant: Variant, aggregation: Aggregation) -> Result<MetricSet> {
    if pairs.len() < 2 {
        return Err(Error::Size(format!("metrics need at least 2 pairs, found {}", pairs.len())));
    }
    let (obs, pred): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let mse = pairs.iter().map(|(y, h)| (y - h) * (y - h)).sum::<f64>() / pairs.len() as f64;
    let pearson_r = stats::pearson(&obs, &pred);
    let spearman_r = stats::spearman(&obs, &pred);
    let flags = if pearson_r.is_none() {
        vec![CORRELATION_UNDEFINED.to_string()]
    } else {
        Vec::new()
    };
    Ok(MetricSet {
        pearson_r,
        spearman_r,
        mse,
        n_pairs: pairs.len(),
        variant,
        aggregation,
        flags,
    })
}

/// Metrics over every scored row of every subject.
pub fn longitudinal_metrics(forecasts: &[SubjectForecast], variant: Variant, exclude_tuning_day: bool) -> Result<MetricSet> {
    let excl = exclude_tuning_day && variant.is_adjusted();
    let pairs: Vec<(f64, f64)> = forecasts.iter().flat_map(|f| f.pairs(variant.is_adjusted(), excl)).collect();
    metrics(&pairs, variant, Aggregation::Longitudinal)
}

/// One `(mean observed, mean predicted)` pair per subject with at least one
/// scored row, then [`metrics`].
pub fn per_subject_mean_metrics(forecasts: &[SubjectForecast], variant: Variant, exclude_tuning_day: bool) -> Result<MetricSet> {
    let excl = exclude_tuning_day && variant.is_adjusted();
    let pairs: Vec<(f64, f64)> = forecasts
        .iter()
        .filter_map(|f| {
            let p = f.pairs(variant.is_adjusted(), excl);
            let (o, h): (Vec<f64>, Vec<f64>) = p.into_iter().unzip();
            Some((stats::mean(&o)?, stats::mean(&h)?))
        })
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Size(format!(
            "per-subject means need at least 2 eligible subjects, found {}",
            pairs.len()
        )));
    }
    metrics(&pairs, variant, Aggregation::PerSubjectMean)
}

/// Repeated-measures correlation: the common within-subject association of
/// `y_obs` (response) with `y_hat` (covariate) after removing subject levels.
///
/// Subjects with fewer than two pairs are dropped. Errors when fewer than two
/// subjects remain; `Ok(None)` when the within-subject variation is zero.
pub fn rmcorr(pairs_by_subject: &[Vec<(f64, f64)>]) -> Result<Option<f64>> {
    let eligible: Vec<&Vec<(f64, f64)>> = pairs_by_subject.iter().filter(|p| p.len() >= 2).collect();
    if eligible.len() < 2 {
        return Err(Error::Undefined(format!(
            "rmcorr needs at least 2 subjects with 2 or more pairs, found {}",
            eligible.len()
        )));
    }
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for p in eligible {
        let n = p.len() as f64;
        let my = p.iter().map(|q| q.0).sum::<f64>() / n;
        let mx = p.iter().map(|q| q.1).sum::<f64>() / n;
        for &(y, x) in p {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Baseline and end-of-study `(y_obs, y_hat)` pairs per subject: the earliest
/// and latest rows where both an observation and a prediction exist.
pub fn endpoint_pairs(forecasts: &[SubjectForecast], variant: Variant) -> Vec<Vec<(f64, f64)>> {
    forecasts
        .iter()
        .map(|f| {
            let p = f.pairs(variant.is_adjusted(), false);
            match (p.first(), p.last()) {
                (Some(&a), Some(&b)) if p.len() >= 2 => vec![a, b],
                _ => Vec::new(),
            }
        })
        .collect()
}
