//! Ground-truth longitudinal data generator.
//!
//! Outcomes follow `y_it = mu + x_it' alpha + z_i' gamma + b_i + e_it` with
//! exchangeable within-subject noise. Features and outcomes are then masked
//! at random with probabilities that depend only on the (never masked) age
//! covariate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, Observation};
use crate::error::{Error, Result};
use crate::gee::{WorkingCorrelation, WorkingKind};
use crate::seed::{self, streams};

pub const OUTCOME_NAME: &str = "y";
const AGE_MEAN: f64 = 45.0;
const AGE_SD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    /// Inclusive range for the number of visits per subject.
    pub t_range: (u32, u32),
    pub p_signal: usize,
    pub p_noise: usize,
    pub true_intercept: f64,
    pub true_feature_coefs: Vec<f64>,
    /// One entry per covariate: age, sex, then standard-normal extras.
    pub true_covariate_coefs: Vec<f64>,
    pub subject_intercept_sd: f64,
    pub within_correlation: f64,
    pub noise_sd: f64,
    /// Expected fraction of missing cells over all feature, covariate and
    /// outcome cells.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_subjects: 80,
            t_range: (4, 10),
            p_signal: 4,
            p_noise: 6,
            true_intercept: 30.0,
            true_feature_coefs: vec![2.0, -1.5, 1.0, 0.5],
            true_covariate_coefs: vec![0.1, 1.0],
            subject_intercept_sd: 3.0,
            within_correlation: 0.3,
            noise_sd: 1.0,
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn n_features(&self) -> usize {
        self.p_signal + self.p_noise
    }

    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.n_features()).map(|j| format!("x{j}")).collect()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (0..self.true_covariate_coefs.len())
            .map(|j| match j {
                0 => "age".to_string(),
                1 => "sex".to_string(),
                _ => format!("z{}", j + 1),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        let (lo, hi) = self.t_range;
        if lo == 0 || lo > hi {
            return bad(format!("t_range must satisfy 1 <= min <= max, got ({lo}, {hi})"));
        }
        if self.p_signal != self.true_feature_coefs.len() {
            return bad(format!(
                "p_signal = {} but {} feature coefficients were given",
                self.p_signal,
                self.true_feature_coefs.len()
            ));
        }
        let reals = [self.true_intercept, self.subject_intercept_sd, self.noise_sd];
        if reals.iter().chain(&self.true_feature_coefs).chain(&self.true_covariate_coefs).any(|v| !v.is_finite()) {
            return bad("generator parameters must be finite".into());
        }
        if self.subject_intercept_sd < 0.0 || self.noise_sd < 0.0 {
            return bad("standard deviations must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate));
        }
        if self.missing_rate > 0.0 && self.true_covariate_coefs.is_empty() {
            return bad("the missingness mechanism needs an age covariate".into());
        }
        let (a_lo, a_hi) = WorkingCorrelation::valid_range(WorkingKind::Exchangeable, hi as usize);
        if !(self.within_correlation > a_lo && self.within_correlation < a_hi) && self.within_correlation != 0.0 {
            return bad(format!(
                "within_correlation {} outside ({a_lo}, {a_hi}) for {hi} visits",
                self.within_correlation
            ));
        }
        let cells = self.n_features() + self.true_covariate_coefs.len() + 1;
        let maskable = self.n_features() + 1;
        if self.missing_rate * cells as f64 >= maskable as f64 {
            return bad("missing_rate exceeds the share of maskable cells".into());
        }
        Ok(())
    }
}

/// Everything needed to score estimates against the generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub subject_intercepts: BTreeMap<String, f64>,
    /// The data before masking.
    pub complete: LongitudinalDataset,
    #[serde(default)]
    pub trend_subjects: BTreeSet<String>,
    #[serde(default)]
    pub trend_slope: f64,
}

impl GroundTruth {
    /// `mu + x' alpha + z' gamma`, plus the injected trend where present,
    /// evaluated on the unmasked row.
    pub fn mean_structure(&self, subject: &str, time: u32) -> Option<f64> {
        let rows = self.complete.subject_rows(subject);
        let obs = rows.iter().find(|o| o.time == time)?;
        let cfg = &self.config;
        let mut m = cfg.true_intercept;
        for (a, x) in cfg.true_feature_coefs.iter().zip(&obs.features) {
            m += a * x.expect("complete data");
        }
        for (g, z) in cfg.true_covariate_coefs.iter().zip(&obs.covariates) {
            m += g * z.expect("complete data");
        }
        // The features of trend subjects already carry the trend.
        Some(m)
    }

    /// `[intercept, feature coefs (zero for noise features), covariate coefs]`.
    pub fn coefficients(&self) -> Vec<f64> {
        let cfg = &self.config;
        let mut out = vec![cfg.true_intercept];
        out.extend(&cfg.true_feature_coefs);
        out.extend(std::iter::repeat_n(0.0, cfg.p_noise));
        out.extend(&cfg.true_covariate_coefs);
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Lower Cholesky factor of the exchangeable matrix, or `None` when
/// `alpha = 0`.
fn exchangeable_factor(t: usize, alpha: f64) -> Option<DMatrix<f64>> {
    if alpha == 0.0 || t == 1 {
        return None;
    }
    let r = WorkingCorrelation::new(WorkingKind::Exchangeable, alpha).matrix(t);
    Some(r.cholesky().expect("validated alpha gives a positive definite matrix").l())
}

/// Draws a complete dataset and its masked copy.
pub fn generate(cfg: &GeneratorConfig) -> Result<(LongitudinalDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, streams::GENERATOR, 0);
    let n_cov = cfg.true_covariate_coefs.len();
    let width = cfg.n_subjects.to_string().len().max(3);
    let sex = Bernoulli::new(0.5).expect("valid probability");
    let b_dist = Normal::new(0.0, cfg.subject_intercept_sd).map_err(|e| Error::Config(e.to_string()))?;

    let mut observations = Vec::new();
    let mut subject_intercepts = BTreeMap::new();
    for i in 0..cfg.n_subjects {
        let id = format!("s{:0width$}", i + 1);
        let t_i = rng.random_range(cfg.t_range.0..=cfg.t_range.1) as usize;
        let b_i = b_dist.sample(&mut rng);
        let z: Vec<f64> = (0..n_cov)
            .map(|j| match j {
                0 => AGE_MEAN + AGE_SD * std_normal(&mut rng),
                1 => f64::from(u8::from(sex.sample(&mut rng))),
                _ => std_normal(&mut rng),
            })
            .collect();
        let raw = DVector::from_fn(t_i, |_, _| std_normal(&mut rng));
        let eps = match exchangeable_factor(t_i, cfg.within_correlation) {
            Some(l) => l * raw,
            None => raw,
        } * cfg.noise_sd;
        let z_part: f64 = cfg.true_covariate_coefs.iter().zip(&z).map(|(g, v)| g * v).sum();
        for t in 0..t_i {
            let x: Vec<f64> = (0..cfg.n_features()).map(|_| std_normal(&mut rng)).collect();
            let x_part: f64 = cfg.true_feature_coefs.iter().zip(&x).map(|(a, v)| a * v).sum();
            let y = cfg.true_intercept + x_part + z_part + b_i + eps[t];
            observations.push(Observation {
                subject: id.clone(),
                time: t as u32 + 1,
                features: x.into_iter().map(Some).collect(),
                covariates: z.iter().copied().map(Some).collect(),
                outcome: Some(y),
            });
        }
        subject_intercepts.insert(id, b_i);
    }
    let complete = LongitudinalDataset::new(observations, cfg.feature_names(), cfg.covariate_names(), OUTCOME_NAME)?;
    let masked = apply_mar_mask(&complete, cfg)?;
    let truth = GroundTruth {
        config: cfg.clone(),
        subject_intercepts,
        complete,
        trend_subjects: BTreeSet::new(),
        trend_slope: 0.0,
    };
    Ok((masked, truth))
}

/// Per-row masking probabilities from ages alone: logistic weights scaled so
/// the row-average probability equals `target`, capped at 1.
pub fn mar_probabilities(ages: &[f64], target: f64) -> Vec<f64> {
    if target <= 0.0 || ages.is_empty() {
        return vec![0.0; ages.len()];
    }
    let w: Vec<f64> = ages.iter().map(|a| 1.0 / (1.0 + (-(a - AGE_MEAN) / AGE_SD).exp())).collect();
    let avg = |s: f64| w.iter().map(|wi| (s * wi).min(1.0)).sum::<f64>() / w.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while avg(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if avg(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    w.iter().map(|wi| (hi * wi).min(1.0)).collect()
}

fn apply_mar_mask(complete: &LongitudinalDataset, cfg: &GeneratorConfig) -> Result<LongitudinalDataset> {
    if cfg.missing_rate == 0.0 {
        return Ok(complete.clone());
    }
    let cells = complete.cells_per_row() as f64;
    let maskable = (complete.n_features() + 1) as f64;
    let per_cell = cfg.missing_rate * cells / maskable;
    let ages: Vec<f64> = complete
        .observations()
        .iter()
        .map(|o| o.covariates[0].expect("covariates are never masked"))
        .collect();
    let probs = mar_probabilities(&ages, per_cell);
    let mut rng = seed::rng(cfg.seed, streams::GENERATOR, 1);
    let observations = complete
        .observations()
        .iter()
        .zip(&probs)
        .map(|(o, &p)| {
            let mut o = o.clone();
            for f in &mut o.features {
                if rng.random::<f64>() < p {
                    *f = None;
                }
            }
            if rng.random::<f64>() < p {
                o.outcome = None;
            }
            o
        })
        .collect();
    complete.with_observations(observations)
}

/// Adds `slope * t` to the outcomes of a seeded `fraction` of subjects, and
/// `slope * t * alpha_j / |alpha|^2` to each signal feature so the trend is
/// carried by the mean structure. Applied to both the dataset and the ground
/// truth; missing cells stay missing.
pub fn inject_trend(
    ds: &LongitudinalDataset,
    truth: &GroundTruth,
    fraction: f64,
    slope: f64,
    seed: u64,
) -> Result<(LongitudinalDataset, GroundTruth)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("trend fraction must lie in [0, 1], got {fraction}")));
    }
    if !slope.is_finite() {
        return Err(Error::Config("trend slope must be finite".into()));
    }
    let mut subjects: Vec<String> = truth.complete.subjects().into_iter().map(str::to_owned).collect();
    let n_pick = (fraction * subjects.len() as f64).round() as usize;
    subjects.shuffle(&mut seed::rng(seed, streams::TREND, 0));
    let picked: BTreeSet<String> = subjects.into_iter().take(n_pick).collect();

    let alpha = &truth.config.true_feature_coefs;
    let norm2: f64 = alpha.iter().map(|a| a * a).sum();
    let shift = |rows: &[Observation]| -> Vec<Observation> {
        rows.iter()
            .map(|o| {
                let mut o = o.clone();
                if picked.contains(&o.subject) {
                    let d = slope * f64::from(o.time);
                    o.outcome = o.outcome.map(|y| y + d);
                    if norm2 > 0.0 {
                        for (f, a) in o.features.iter_mut().zip(alpha) {
                            *f = f.map(|x| x + d * a / norm2);
                        }
                    }
                }
                o
            })
            .collect()
    };
    let out = ds.with_observations(shift(ds.observations()))?;
    let mut new_truth = truth.clone();
    new_truth.complete = truth.complete.with_observations(shift(truth.complete.observations()))?;
    new_truth.trend_subjects.extend(picked);
    new_truth.trend_slope = slope;
    Ok((out, new_truth))
}
