//! Marginal feature screening and the selection mask applied before GEE fitting.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{LongitudinalDataset, Observation};
use crate::error::{Error, Result};
use crate::stats::pearson;

/// How features are ranked during screening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreenMode {
    /// Largest absolute Pearson correlation first.
    #[default]
    AbsCorrelation,
    /// Smallest two-sided correlation-test p-value first.
    PValue,
}

/// How many features survive screening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Threshold {
    Count(usize),
    /// Minimum |rho| (correlation mode) or maximum p-value (p-value mode).
    Epsilon(f64),
}

/// Screening statistic of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub n_pairs: usize,
    /// Set when the feature could not be ranked.
    pub excluded: Option<String>,
}

/// Which features and covariates enter the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Indices into `feature_names`, in rank order.
    pub selected_feature_indices: Vec<usize>,
    pub selected_covariate_indices: Vec<usize>,
    pub scores: Vec<FeatureScore>,
    pub mode: ScreenMode,
    pub threshold_used: Threshold,
}

impl SelectionMask {
    /// Mask keeping every feature and covariate in column order.
    pub fn identity(ds: &LongitudinalDataset) -> Self {
        Self {
            feature_names: ds.feature_names().to_vec(),
            covariate_names: ds.covariate_names().to_vec(),
            selected_feature_indices: (0..ds.n_features()).collect(),
            selected_covariate_indices: (0..ds.n_covariates()).collect(),
            scores: vec![
                FeatureScore {
                    rho: None,
                    p_value: None,
                    n_pairs: 0,
                    excluded: None,
                };
                ds.n_features()
            ],
            mode: ScreenMode::AbsCorrelation,
            threshold_used: Threshold::Count(ds.n_features()),
        }
    }

    pub fn q(&self) -> usize {
        self.selected_feature_indices.len()
    }

    pub fn selected_feature_names(&self) -> Vec<&str> {
        self.selected_feature_indices
            .iter()
            .map(|&i| self.feature_names[i].as_str())
            .collect()
    }

    pub fn selected_covariate_names(&self) -> Vec<&str> {
        self.selected_covariate_indices
            .iter()
            .map(|&i| self.covariate_names[i].as_str())
            .collect()
    }

    pub fn warnings(&self) -> Vec<String> {
        self.scores
            .iter()
            .zip(&self.feature_names)
            .filter_map(|(s, n)| s.excluded.as_ref().map(|why| format!("feature `{n}` excluded: {why}")))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MaskWire {
    selected: Vec<String>,
    scores: indexmap::IndexMap<String, Option<f64>>,
    q: usize,
    covariates: Vec<String>,
    mode: ScreenMode,
    threshold: Threshold,
    details: Vec<FeatureScore>,
}

impl Serialize for SelectionMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskWire {
            selected: self.selected_feature_names().into_iter().map(String::from).collect(),
            scores: self
                .feature_names
                .iter()
                .cloned()
                .zip(self.scores.iter().map(|f| f.rho))
                .collect(),
            q: self.q(),
            covariates: self.selected_covariate_names().into_iter().map(String::from).collect(),
            mode: self.mode,
            threshold: self.threshold_used,
            details: self.scores.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SelectionMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let w = MaskWire::deserialize(d)?;
        let feature_names: Vec<String> = w.scores.keys().cloned().collect();
        let find = |names: &[String], n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| D::Error::custom(format!("unknown selected name `{n}`")))
        };
        let selected_feature_indices = w
            .selected
            .iter()
            .map(|n| find(&feature_names, n))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        // covariate names beyond the selected ones are not recorded
        let covariate_names = w.covariates.clone();
        if w.details.len() != feature_names.len() {
            return Err(D::Error::custom("details length does not match scores"));
        }
        Ok(Self {
            selected_feature_indices,
            selected_covariate_indices: (0..covariate_names.len()).collect(),
            feature_names,
            covariate_names,
            scores: w.details,
            mode: w.mode,
            threshold_used: w.threshold,
        })
    }
}

fn score_features(train: &LongitudinalDataset) -> Vec<FeatureScore> {
    (0..train.n_features())
        .map(|j| {
            let (x, y): (Vec<f64>, Vec<f64>) = train
                .observations()
                .iter()
                .filter_map(|o: &Observation| Some((o.features[j]?, o.outcome?)))
                .unzip();
            let n = x.len();
            if n < 3 {
                return FeatureScore {
                    rho: None,
                    p_value: None,
                    n_pairs: n,
                    excluded: Some(format!("only {n} complete pairs")),
                };
            }
            match pearson(&x, &y) {
                Some(r) => FeatureScore {
                    rho: Some(r),
                    p_value: Some(correlation_p_value(r, n)),
                    n_pairs: n,
                    excluded: None,
                },
                None => FeatureScore {
                    rho: None,
                    p_value: None,
                    n_pairs: n,
                    excluded: Some("zero variance".into()),
                },
            }
        })
        .collect()
}

/// Two-sided p-value of H0: rho = 0 using the t statistic on n - 2 df.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

fn ranked(scores: &[FeatureScore], mode: ScreenMode) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| scores[j].rho.is_some()).collect();
    let abs = |j: usize| scores[j].rho.map_or(0.0, f64::abs);
    let p = |j: usize| scores[j].p_value.unwrap_or(1.0);
    match mode {
        ScreenMode::AbsCorrelation => idx.sort_by(|&a, &b| abs(b).total_cmp(&abs(a)).then(a.cmp(&b))),
        ScreenMode::PValue => idx.sort_by(|&a, &b| {
            p(a).total_cmp(&p(b))
                .then(abs(b).total_cmp(&abs(a)))
                .then(a.cmp(&b))
        }),
    }
    idx
}

fn covariate_indices(train: &LongitudinalDataset, always: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &i in always {
        if i >= train.n_covariates() {
            return Err(Error::Integrity(format!(
                "covariate index {i} out of range for {} covariates",
                train.n_covariates()
            )));
        }
        if !out.contains(&i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Ranks features by their pooled-row association with the outcome and keeps
/// the top `q`, ties going to the smaller column index.
pub fn screen_features(
    train: &LongitudinalDataset,
    q: usize,
    always_include_covariates: &[usize],
    mode: ScreenMode,
) -> Result<SelectionMask> {
    if q > train.n_features() {
        return Err(Error::Selection(format!(
            "q = {q} exceeds the {} available features",
            train.n_features()
        )));
    }
    let selected_covariate_indices = covariate_indices(train, always_include_covariates)?;
    let scores = score_features(train);
    let order = ranked(&scores, mode);
    if q > order.len() {
        return Err(Error::Selection(format!(
            "q = {q} exceeds the {} rankable features",
            order.len()
        )));
    }
    Ok(SelectionMask {
        feature_names: train.feature_names().to_vec(),
        covariate_names: train.covariate_names().to_vec(),
        selected_feature_indices: order[..q].to_vec(),
        selected_covariate_indices,
        scores,
        mode,
        threshold_used: Threshold::Count(q),
    })
}

/// Threshold variant of [`screen_features`]: keeps every rankable feature with
/// `|rho| >= epsilon` (correlation mode) or `p <= epsilon` (p-value mode).
pub fn select_by_threshold(
    train: &LongitudinalDataset,
    epsilon: f64,
    always_include_covariates: &[usize],
    mode: ScreenMode,
) -> Result<SelectionMask> {
    let selected_covariate_indices = covariate_indices(train, always_include_covariates)?;
    let scores = score_features(train);
    let selected = ranked(&scores, mode)
        .into_iter()
        .filter(|&j| match mode {
            ScreenMode::AbsCorrelation => scores[j].rho.is_some_and(|r| r.abs() >= epsilon),
            ScreenMode::PValue => scores[j].p_value.is_some_and(|p| p <= epsilon),
        })
        .collect();
    Ok(SelectionMask {
        feature_names: train.feature_names().to_vec(),
        covariate_names: train.covariate_names().to_vec(),
        selected_feature_indices: selected,
        selected_covariate_indices,
        scores,
        mode,
        threshold_used: Threshold::Epsilon(epsilon),
    })
}

/// Restricts `ds` to the mask's features and covariates. Column names must
/// match the data the mask was learned on.
pub fn apply_mask(ds: &LongitudinalDataset, mask: &SelectionMask) -> Result<LongitudinalDataset> {
    let resolve = |mask_names: &[String], ds_names: &[String], picked: &[usize], kind: &str| {
        picked
            .iter()
            .map(|&i| {
                let name = mask_names.get(i).ok_or_else(|| {
                    Error::Integrity(format!("{kind} index {i} out of range"))
                })?;
                ds_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Integrity(format!("{kind} `{name}` not present in dataset")))
            })
            .collect::<Result<Vec<usize>>>()
    };
    let f_idx = resolve(&mask.feature_names, ds.feature_names(), &mask.selected_feature_indices, "feature")?;
    let c_idx = resolve(
        &mask.covariate_names,
        ds.covariate_names(),
        &mask.selected_covariate_indices,
        "covariate",
    )?;
    let observations = ds
        .observations()
        .iter()
        .map(|o| Observation {
            subject: o.subject.clone(),
            time: o.time,
            features: f_idx.iter().map(|&j| o.features[j]).collect(),
            covariates: c_idx.iter().map(|&j| o.covariates[j]).collect(),
            outcome: o.outcome,
        })
        .collect();
    LongitudinalDataset::new(
        observations,
        f_idx.iter().map(|&j| ds.feature_names()[j].clone()).collect(),
        c_idx.iter().map(|&j| ds.covariate_names()[j].clone()).collect(),
        ds.outcome_name(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> LongitudinalDataset {
        // y = 2*x1 + small wobble; x2 weakly related; x3 constant
        let ys = [1.0, 2.5, 2.9, 4.2, 5.1, 5.8];
        let x2 = [0.3, -0.1, 0.4, 0.0, 0.5, 0.2];
        let obs = (0..6)
            .map(|i| Observation {
                subject: format!("s{}", i / 2),
                time: (i % 2 + 1) as u32,
                features: vec![Some(ys[i]), Some(x2[i]), Some(1.0)],
                covariates: vec![Some(40.0 + i as f64 / 2.0), Some((i % 3) as f64)],
                outcome: Some(ys[i]),
            })
            .collect();
        LongitudinalDataset::new(
            obs,
            vec!["x1".into(), "x2".into(), "x3".into()],
            vec!["age".into(), "sex".into()],
            "y",
        )
        .unwrap()
    }

    #[test]
    fn self_correlation_ranks_first() {
        let m = screen_features(&ds(), 1, &[0, 1], ScreenMode::AbsCorrelation).unwrap();
        assert_eq!(m.selected_feature_indices, vec![0]);
        assert!((m.scores[0].rho.unwrap() - 1.0).abs() < 1e-12);
        assert!(m.scores[2].excluded.is_some());
        assert_eq!(m.warnings().len(), 1);
    }

    #[test]
    fn exhaustive_selection_respects_rankable_count() {
        let d = ds();
        let m = screen_features(&d, 2, &[], ScreenMode::AbsCorrelation).unwrap();
        assert_eq!(m.selected_feature_indices, vec![0, 1]);
        assert!(matches!(
            screen_features(&d, 3, &[], ScreenMode::AbsCorrelation),
            Err(Error::Selection(_))
        ));
        assert!(matches!(
            screen_features(&d, 4, &[], ScreenMode::AbsCorrelation),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn threshold_and_count_agree() {
        let d = ds();
        let by_count = screen_features(&d, 2, &[0], ScreenMode::AbsCorrelation).unwrap();
        let eps = by_count.scores[by_count.selected_feature_indices[1]].rho.unwrap().abs();
        let by_eps = select_by_threshold(&d, eps, &[0], ScreenMode::AbsCorrelation).unwrap();
        assert_eq!(by_count.selected_feature_indices, by_eps.selected_feature_indices);
        let p_mode = screen_features(&d, 2, &[0], ScreenMode::PValue).unwrap();
        assert_eq!(p_mode.selected_feature_indices, vec![0, 1]);
    }

    #[test]
    fn p_value_reference() {
        // r = 0.5, n = 12: t = 0.5*sqrt(10/0.75) = 1.8257, two-sided p = 0.0979 on 10 df
        assert!((correlation_p_value(0.5, 12) - 0.0979).abs() < 5e-4);
        assert_eq!(correlation_p_value(1.0, 5), 0.0);
    }

    #[test]
    fn masks_apply_by_name() {
        let d = ds();
        assert_eq!(apply_mask(&d, &SelectionMask::identity(&d)).unwrap(), d);

        let mut m = screen_features(&d, 0, &[0, 1], ScreenMode::AbsCorrelation).unwrap();
        let only_cov = apply_mask(&d, &m).unwrap();
        assert_eq!(only_cov.n_features(), 0);
        assert_eq!(only_cov.n_covariates(), 2);
        assert_eq!(only_cov.len(), d.len());

        m.selected_feature_indices = vec![9];
        assert!(matches!(apply_mask(&d, &m), Err(Error::Integrity(_))));
    }

    #[test]
    fn json_shape() {
        let m = screen_features(&ds(), 2, &[0, 1], ScreenMode::AbsCorrelation).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["selected"], serde_json::json!(["x1", "x2"]));
        assert_eq!(v["q"], 2);
        assert!(v["scores"]["x3"].is_null());
        let back: SelectionMask = serde_json::from_value(v).unwrap();
        assert_eq!(back.selected_feature_indices, m.selected_feature_indices);
        assert_eq!(back.selected_covariate_names(), vec!["age", "sex"]);
    }
}
