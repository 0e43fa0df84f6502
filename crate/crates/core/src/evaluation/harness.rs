use std::collections::BTreeSet;
use std::io::Write;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::changes::{classify_changes, ChangeGroups};
use super::metrics::{endpoint_pairs, longitudinal_metrics, per_subject_mean_metrics, rmcorr, MetricSet, Variant};
use crate::data::{split_by_subject, split_ids, LongitudinalDataset, SplitSpec};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::imputation::ImputedSet;
use crate::pipeline::{train_model_detailed, ModelConfig};
use crate::prediction::{forecast_subject_audited, PredictOptions, SubjectForecast, SubjectSlice, Tuning};
use crate::seed::{self, streams};
use crate::selection::SelectionMask;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionConfig {
    pub fine_tune: bool,
    /// Leave the tuning row out of adjusted metrics.
    pub exclude_tuning_day: bool,
    pub clamp: Option<(f64, f64)>,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            fine_tune: true,
            exclude_tuning_day: true,
            clamp: None,
        }
    }
}

impl PredictionConfig {
    pub fn options(&self) -> PredictOptions {
        PredictOptions { clamp: self.clamp }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(Error::Config(format!("prediction.clamp needs lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub n_boot: usize,
    pub tau: f64,
    pub train_fraction: f64,
    /// Bootstrap aborts when more than this share of replicates fail.
    pub max_failure_fraction: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            tau: 0.5,
            train_fraction: 0.7,
            max_failure_fraction: 0.2,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("evaluation.tau must be positive, got {}", self.tau)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "evaluation.train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("evaluation.max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Full configuration of the evaluation harness.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    pub prediction: PredictionConfig,
    pub evaluation: EvaluationConfig,
    pub seed: u64,
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prediction.validate()?;
        self.evaluation.validate()
    }

    /// Split seed for job `index` (0 for a single split).
    pub fn split_seed(&self, index: u64) -> u64 {
        seed::derive(self.seed, streams::SPLIT, index)
    }

    /// Imputation seed for job `index` under `label`.
    pub fn imputation_seed(&self, label: &str, index: u64) -> u64 {
        seed::derive(self.seed, label, index)
    }
}

/// Observation hooks for auditing the harness. Every method defaults to a
/// no-op.
pub trait Probe: Sync {
    fn on_split(&self, _job: usize, _train: &LongitudinalDataset, _test: &LongitudinalDataset) {}
    fn on_imputed(&self, _job: usize, _imputed: &ImputedSet) {}
    /// Outcome rows of `subject` read before scoring, and the resulting forecast.
    fn on_outcome_reads(&self, _job: usize, _subject: &str, _reads: &[usize], _forecast: &SubjectForecast) {}
}

pub struct NoProbe;

impl Probe for NoProbe {}

/// Metrics for one set of test forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_subjects: usize,
    pub n_scored_rows: usize,
    pub n_skipped_rows: usize,
    pub n_untuned_subjects: usize,
    pub raw: MetricSet,
    pub adjusted: Option<MetricSet>,
    pub raw_subject_mean: Option<MetricSet>,
    pub adjusted_subject_mean: Option<MetricSet>,
    /// Over baseline and end-of-study pairs.
    pub rmcorr: Option<f64>,
    pub change_groups: Option<ChangeGroups>,
    pub warnings: Vec<String>,
}

pub fn evaluate_forecasts(forecasts: &[SubjectForecast], pred: &PredictionConfig, tau: f64) -> Result<EvaluationReport> {
    let mut warnings = Vec::new();
    let mut soft = |r: Result<MetricSet>, what: &str| match r {
        Ok(m) => Some(m),
        Err(e) => {
            warnings.push(format!("{what}: {e}"));
            None
        }
    };
    let excl = pred.exclude_tuning_day;
    let raw = longitudinal_metrics(forecasts, Variant::Raw, excl)?;
    let raw_subject_mean = soft(per_subject_mean_metrics(forecasts, Variant::Raw, excl), "raw per-subject means");
    let (adjusted, adjusted_subject_mean) = if pred.fine_tune {
        (
            soft(longitudinal_metrics(forecasts, Variant::Adjusted, excl), "adjusted metrics"),
            soft(per_subject_mean_metrics(forecasts, Variant::Adjusted, excl), "adjusted per-subject means"),
        )
    } else {
        (None, None)
    };
    let rmcorr = match rmcorr(&endpoint_pairs(forecasts, Variant::Raw)) {
        Ok(v) => v,
        Err(e) => {
            warnings.push(format!("rmcorr: {e}"));
            None
        }
    };
    let change_groups = Some(classify_changes(forecasts, tau, Variant::Raw)?);
    let entries = forecasts.iter().flat_map(|f| &f.entries);
    Ok(EvaluationReport {
        n_subjects: forecasts.len(),
        n_scored_rows: entries.clone().filter(|e| e.y_hat_raw.is_some() && e.y_observed.is_some()).count(),
        n_skipped_rows: entries.filter(|e| e.skipped()).count(),
        n_untuned_subjects: forecasts.iter().filter(|f| matches!(f.tuning, Tuning::Untuned { .. })).count(),
        raw,
        adjusted,
        raw_subject_mean,
        adjusted_subject_mean,
        rmcorr,
        change_groups,
        warnings,
    })
}

fn forecast_test(
    job: usize,
    model: &EnsembleModel,
    test: &LongitudinalDataset,
    pred: &PredictionConfig,
    probe: &dyn Probe,
) -> Vec<SubjectForecast> {
    let opts = pred.options();
    SubjectSlice::all(test)
        .iter()
        .map(|rows| {
            let (f, reads) = forecast_subject_audited(model, rows, pred.fine_tune, &opts);
            probe.on_outcome_reads(job, &f.subject_id, &reads, &f);
            f
        })
        .collect()
}

/// Result of training on one split and scoring the held-out subjects.
#[derive(Debug, Clone)]
pub struct SplitEvaluation {
    pub split: SplitSpec,
    pub mask: SelectionMask,
    pub model: EnsembleModel,
    pub forecasts: Vec<SubjectForecast>,
    pub report: EvaluationReport,
}

/// Train on `train`, forecast `test`, evaluate. `job` labels probe calls.
pub fn train_and_evaluate(
    job: usize,
    train: &LongitudinalDataset,
    test: &LongitudinalDataset,
    model_cfg: &ModelConfig,
    cfg: &HarnessConfig,
    probe: &dyn Probe,
) -> Result<(SelectionMask, EnsembleModel, Vec<SubjectForecast>, EvaluationReport)> {
    probe.on_split(job, train, test);
    let trained = train_model_detailed(train, model_cfg)?;
    probe.on_imputed(job, &trained.imputed);
    let forecasts = forecast_test(job, &trained.model, test, &cfg.prediction, probe);
    let report = evaluate_forecasts(&forecasts, &cfg.prediction, cfg.evaluation.tau)?;
    Ok((trained.mask, trained.model, forecasts, report))
}

/// One subject-level split with seeds derived from the root seed.
pub fn evaluate_split(ds: &LongitudinalDataset, cfg: &HarnessConfig, probe: &dyn Probe) -> Result<SplitEvaluation> {
    cfg.validate()?;
    let split = split_by_subject(ds, cfg.evaluation.train_fraction, cfg.split_seed(0))?;
    let model_cfg = cfg.model.with_imputation_seed(cfg.imputation_seed(streams::IMPUTATION, 0));
    let (mask, model, forecasts, report) =
        train_and_evaluate(0, &split.train(ds), &split.test(ds), &model_cfg, cfg, probe)?;
    Ok(SplitEvaluation {
        split,
        mask,
        model,
        forecasts,
        report,
    })
}

/// Separator between an original subject id and its copy number.
pub const COPY_SEPARATOR: char = '#';

/// Draws `N` subjects with replacement. The k-th copy of subject `id` becomes
/// `id#k`, so copies are distinct clusters downstream.
pub fn resample_subjects<R: Rng>(ds: &LongitudinalDataset, rng: &mut R) -> Result<LongitudinalDataset> {
    let ranges = ds.subject_ranges();
    let n = ranges.len();
    if n == 0 {
        return Err(Error::Size("cannot resample an empty dataset".into()));
    }
    let mut copies = vec![0usize; n];
    let mut observations = Vec::with_capacity(ds.len());
    for _ in 0..n {
        let i = rng.random_range(0..n);
        copies[i] += 1;
        let (id, range) = &ranges[i];
        for o in &ds.observations()[range.clone()] {
            let mut o = o.clone();
            o.subject = format!("{id}{COPY_SEPARATOR}{}", copies[i]);
            observations.push(o);
        }
    }
    ds.with_observations(observations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub failure: Option<String>,
    pub raw: Option<MetricSet>,
    pub adjusted: Option<MetricSet>,
    pub raw_subject_mean: Option<MetricSet>,
    pub rmcorr: Option<f64>,
    pub selected_features: Vec<String>,
    pub n_train_subjects: usize,
    pub n_test_subjects: usize,
    pub confusion: Option<[[usize; 3]; 3]>,
}

impl Replicate {
    fn failed(index: usize, e: &Error) -> Self {
        Self {
            index,
            failure: Some(format!("{}: {e}", e.kind())),
            raw: None,
            adjusted: None,
            raw_subject_mean: None,
            rmcorr: None,
            selected_features: Vec::new(),
            n_train_subjects: 0,
            n_test_subjects: 0,
            confusion: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NullReference {
    pub pearson_sd: Option<f64>,
    pub spearman_sd: Option<f64>,
    pub pearson: Vec<f64>,
    pub spearman: Vec<f64>,
}

/// Mean and standard deviation of a replicate statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            n: values.len(),
            mean: stats::mean(values),
            sd: stats::sample_sd(values),
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> Option<f64> {
        Some(self.sd? / (self.n as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub raw_pearson: Summary,
    pub raw_spearman: Summary,
    pub adjusted_pearson: Summary,
    pub adjusted_spearman: Summary,
    pub rmcorr: Summary,
    pub p_rmcorr_negative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub n_boot: usize,
    pub n_failed: usize,
    pub replicates: Vec<Replicate>,
    pub summary: BootstrapSummary,
    pub null_reference: NullReference,
    pub rmcorr_values: Vec<f64>,
    /// Times each feature was selected, in column order.
    pub feature_frequency: IndexMap<String, usize>,
    /// Summed raw change-group confusion over successful replicates.
    pub confusion: [[usize; 3]; 3],
}

impl BootstrapReport {
    fn values(&self, f: impl Fn(&Replicate) -> Option<f64>) -> Vec<f64> {
        self.replicates.iter().filter(|r| r.failure.is_none()).filter_map(f).collect()
    }

    pub fn raw_pearson(&self) -> Vec<f64> {
        self.values(|r| r.raw.as_ref()?.pearson_r)
    }

    pub fn adjusted_pearson(&self) -> Vec<f64> {
        self.values(|r| r.adjusted.as_ref()?.pearson_r)
    }

    /// Flat per-replicate table for plotting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "replicate",
            "status",
            "raw_pearson",
            "raw_spearman",
            "raw_mse",
            "adj_pearson",
            "adj_spearman",
            "adj_mse",
            "rmcorr",
            "null_pearson",
            "null_spearman",
        ])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (k, r) in self.replicates.iter().enumerate() {
            let raw = r.raw.as_ref();
            let adj = r.adjusted.as_ref();
            w.write_record([
                r.index.to_string(),
                if r.failure.is_some() { "failed".into() } else { "ok".into() },
                fmt(raw.and_then(|m| m.pearson_r)),
                fmt(raw.and_then(|m| m.spearman_r)),
                fmt(raw.map(|m| m.mse)),
                fmt(adj.and_then(|m| m.pearson_r)),
                fmt(adj.and_then(|m| m.spearman_r)),
                fmt(adj.map(|m| m.mse)),
                fmt(r.rmcorr),
                fmt(self.null_reference.pearson.get(k).copied()),
                fmt(self.null_reference.spearman.get(k).copied()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The subject a bootstrap copy was drawn from.
pub fn origin_of(id: &str) -> &str {
    id.rsplit_once(COPY_SEPARATOR).map_or(id, |(origin, _)| origin)
}

/// Splits a resample by original subject, so every copy of a subject lands on
/// the same side.
pub fn split_by_origin(sample: &LongitudinalDataset, train_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let origins: BTreeSet<&str> = sample.subjects().into_iter().map(origin_of).collect();
    let (train_o, _) = split_ids(origins.into_iter().map(str::to_owned).collect(), train_fraction, seed)?;
    let (train_subjects, test_subjects) = sample
        .subjects()
        .into_iter()
        .map(str::to_owned)
        .partition(|id| train_o.contains(origin_of(id)));
    Ok(SplitSpec {
        train_subjects,
        test_subjects,
        seed,
    })
}

fn run_replicate(ds: &LongitudinalDataset, cfg: &HarnessConfig, b: usize, probe: &dyn Probe) -> Result<Replicate> {
    let mut rng = seed::rng(cfg.seed, streams::BOOTSTRAP, b as u64);
    let sample = resample_subjects(ds, &mut rng)?;
    let split = split_by_origin(&sample, cfg.evaluation.train_fraction, cfg.split_seed(b as u64))?;
    let model_cfg = cfg.model.with_imputation_seed(cfg.imputation_seed(streams::BOOTSTRAP_IMPUTATION, b as u64));
    let (mask, _, _, report) = train_and_evaluate(b, &split.train(&sample), &split.test(&sample), &model_cfg, cfg, probe)?;
    Ok(Replicate {
        index: b,
        failure: None,
        raw: Some(report.raw),
        adjusted: report.adjusted,
        raw_subject_mean: report.raw_subject_mean,
        rmcorr: report.rmcorr,
        selected_features: mask.selected_feature_names().into_iter().map(str::to_owned).collect(),
        n_train_subjects: split.train_subjects.len(),
        n_test_subjects: split.test_subjects.len(),
        confusion: report.change_groups.map(|g| g.confusion),
    })
}

fn null_sample(values: &[f64], rng: &mut impl Rng) -> (Option<f64>, Vec<f64>) {
    let Some(sd) = stats::sample_sd(values) else {
        return (None, Vec::new());
    };
    let dist = Normal::new(0.0, sd).expect("finite non-negative sd");
    (Some(sd), (0..values.len()).map(|_| dist.sample(rng)).collect())
}

/// Bootstrap experiments: resample subjects, split, train on the training
/// part only, score the test part. Replicates run in parallel and are
/// reported in index order.
pub fn bootstrap(ds: &LongitudinalDataset, cfg: &HarnessConfig, probe: &dyn Probe) -> Result<BootstrapReport> {
    cfg.validate()?;
    let n_boot = cfg.evaluation.n_boot;
    if n_boot == 0 {
        return Err(Error::Config("evaluation.n_boot must be at least 1".into()));
    }
    let replicates: Vec<Replicate> = (0..n_boot)
        .into_par_iter()
        .map(|b| run_replicate(ds, cfg, b, probe).unwrap_or_else(|e| Replicate::failed(b, &e)))
        .collect();
    let n_failed = replicates.iter().filter(|r| r.failure.is_some()).count();
    if n_failed as f64 > cfg.evaluation.max_failure_fraction * n_boot as f64 {
        let first = replicates.iter().find_map(|r| r.failure.clone()).unwrap_or_default();
        return Err(Error::Harness(format!(
            "{n_failed} of {n_boot} bootstrap replicates failed (first: {first})"
        )));
    }

    let ok: Vec<&Replicate> = replicates.iter().filter(|r| r.failure.is_none()).collect();
    let collect = |f: &dyn Fn(&Replicate) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
    let raw_p = collect(&|r| r.raw.as_ref()?.pearson_r);
    let raw_s = collect(&|r| r.raw.as_ref()?.spearman_r);
    let adj_p = collect(&|r| r.adjusted.as_ref()?.pearson_r);
    let adj_s = collect(&|r| r.adjusted.as_ref()?.spearman_r);
    let rmcorr_values = collect(&|r| r.rmcorr);

    let mut rng = seed::rng(cfg.seed, streams::NULL_REFERENCE, 0);
    let (pearson_sd, pearson) = null_sample(&raw_p, &mut rng);
    let (spearman_sd, spearman) = null_sample(&raw_s, &mut rng);

    let mut feature_frequency: IndexMap<String, usize> = ds.feature_names().iter().map(|n| (n.clone(), 0)).collect();
    let mut confusion = [[0usize; 3]; 3];
    for r in &ok {
        for name in &r.selected_features {
            *feature_frequency.entry(name.clone()).or_default() += 1;
        }
        if let Some(c) = r.confusion {
            for (i, row) in c.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    confusion[i][j] += v;
                }
            }
        }
    }
    let p_rmcorr_negative =
        (!rmcorr_values.is_empty()).then(|| rmcorr_values.iter().filter(|&&v| v < 0.0).count() as f64 / rmcorr_values.len() as f64);
    Ok(BootstrapReport {
        n_boot,
        n_failed,
        summary: BootstrapSummary {
            raw_pearson: Summary::of(&raw_p),
            raw_spearman: Summary::of(&raw_s),
            adjusted_pearson: Summary::of(&adj_p),
            adjusted_spearman: Summary::of(&adj_s),
            rmcorr: Summary::of(&rmcorr_values),
            p_rmcorr_negative,
        },
        replicates,
        null_reference: NullReference {
            pearson_sd,
            spearman_sd,
            pearson,
            spearman,
        },
        rmcorr_values,
        feature_frequency,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvFold {
    pub subject: String,
    pub failure: Option<String>,
    pub selected_features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvReport {
    pub folds: Vec<LoocvFold>,
    pub n_failed: usize,
    pub forecasts: Vec<SubjectForecast>,
    pub change_groups: ChangeGroups,
    pub change_groups_adjusted: Option<ChangeGroups>,
    pub raw: Option<MetricSet>,
    pub adjusted: Option<MetricSet>,
}

/// Leave-one-subject-out: every subject is forecast once by a model trained
/// on all others.
pub fn loocv(ds: &LongitudinalDataset, cfg: &HarnessConfig, probe: &dyn Probe) -> Result<LoocvReport> {
    cfg.validate()?;
    let subjects: Vec<String> = ds.subjects().into_iter().map(str::to_owned).collect();
    if subjects.len() < 3 {
        return Err(Error::Size(format!("LOOCV needs at least 3 subjects, found {}", subjects.len())));
    }
    let all: BTreeSet<String> = subjects.iter().cloned().collect();
    let folds: Vec<(LoocvFold, Option<SubjectForecast>)> = subjects
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let mut rest = all.clone();
            rest.remove(id);
            let train = ds.subset(&rest);
            let test = ds.subset(&BTreeSet::from([id.clone()]));
            let model_cfg = cfg.model.with_imputation_seed(cfg.imputation_seed(streams::LOOCV, i as u64));
            let run = || -> Result<(SelectionMask, SubjectForecast)> {
                probe.on_split(i, &train, &test);
                let trained = train_model_detailed(&train, &model_cfg)?;
                probe.on_imputed(i, &trained.imputed);
                let f = forecast_test(i, &trained.model, &test, &cfg.prediction, probe).remove(0);
                Ok((trained.mask, f))
            };
            match run() {
                Ok((mask, f)) => (
                    LoocvFold {
                        subject: id.clone(),
                        failure: None,
                        selected_features: mask.selected_feature_names().into_iter().map(str::to_owned).collect(),
                    },
                    Some(f),
                ),
                Err(e) => (
                    LoocvFold {
                        subject: id.clone(),
                        failure: Some(format!("{}: {e}", e.kind())),
                        selected_features: Vec::new(),
                    },
                    None,
                ),
            }
        })
        .collect();
    let n_failed = folds.iter().filter(|(f, _)| f.failure.is_some()).count();
    if n_failed == folds.len() {
        return Err(Error::Harness(format!("all {n_failed} LOOCV folds failed")));
    }
    let (folds, forecasts): (Vec<LoocvFold>, Vec<Option<SubjectForecast>>) = folds.into_iter().unzip();
    let forecasts: Vec<SubjectForecast> = forecasts.into_iter().flatten().collect();
    let tau = cfg.evaluation.tau;
    let excl = cfg.prediction.exclude_tuning_day;
    Ok(LoocvReport {
        change_groups: classify_changes(&forecasts, tau, Variant::Raw)?,
        change_groups_adjusted: if cfg.prediction.fine_tune {
            Some(classify_changes(&forecasts, tau, Variant::Adjusted)?)
        } else {
            None
        },
        raw: longitudinal_metrics(&forecasts, Variant::Raw, excl).ok(),
        adjusted: if cfg.prediction.fine_tune {
            longitudinal_metrics(&forecasts, Variant::Adjusted, excl).ok()
        } else {
            None
        },
        folds,
        n_failed,
        forecasts,
    })
}
