//! Pooling of per-imputation GEE fits into a single predictive model.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::gee::{predict_mean, GeeFit, Link};
use crate::selection::SelectionMask;

/// Pooled interval construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    /// Between-imputation spread only: `mean ± t * s / sqrt(M)` with
    /// `s^2 = sum (b_m - mean)^2 / M`.
    #[default]
    BetweenImputation,
    /// Rubin's rules: total variance `W + (1 + 1/M) B`.
    Rubin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiOptions {
    pub level: f64,
    /// Degrees of freedom of the t quantile. `None` means `M - 1` for the
    /// between-imputation interval and the classic Rubin df otherwise.
    pub df: Option<f64>,
    pub method: CiMethod,
}

impl Default for CiOptions {
    fn default() -> Self {
        Self {
            level: 0.95,
            df: None,
            method: CiMethod::BetweenImputation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// `None` when the normal quantile was used (infinite df).
    pub df: Option<f64>,
}

/// Parameter-averaged ensemble of `M` GEE fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub link: Link,
    pub mask: SelectionMask,
    /// All feature names of the source data, in column order.
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Indices into `feature_names` / `covariate_names` of the model terms.
    pub selected_features: Vec<usize>,
    pub selected_covariates: Vec<usize>,
    pub pooled_intercept: f64,
    /// Length = number of source features; zero at unselected positions.
    pub pooled_feature_coefs: Vec<f64>,
    /// Length = number of source covariates; zero at unselected positions.
    pub pooled_covariate_coefs: Vec<f64>,
    pub per_imputation_fits: Vec<GeeFit>,
    pub ci_table: Vec<CiRow>,
}

impl EnsembleModel {
    pub fn m(&self) -> usize {
        self.per_imputation_fits.len()
    }

    /// Linear predictor mapped through the inverse link for one full-width
    /// row. `None` if any selected cell is missing.
    pub fn predict_row(&self, features: &[Option<f64>], covariates: &[Option<f64>]) -> Option<f64> {
        let mut eta = self.pooled_intercept;
        for &j in &self.selected_features {
            eta += self.pooled_feature_coefs[j] * features.get(j).copied().flatten()?;
        }
        for &j in &self.selected_covariates {
            eta += self.pooled_covariate_coefs[j] * covariates.get(j).copied().flatten()?;
        }
        Some(self.link.inverse(eta))
    }

    /// The pooled coefficients arranged like one of the member fits, so
    /// [`predict_mean`] can be used on masked data.
    pub fn pooled_fit(&self) -> Option<GeeFit> {
        let first = self.per_imputation_fits.first()?;
        let coefs = mean_coefficients(&self.per_imputation_fits);
        let p = first.feature_coefs.len();
        Some(GeeFit {
            intercept: coefs[0],
            feature_coefs: coefs[1..1 + p].to_vec(),
            covariate_coefs: coefs[1 + p..].to_vec(),
            n_iterations: 0,
            warnings: Vec::new(),
            ..first.clone()
        })
    }

    /// Recomputes the interval table under `opts` (left empty for `M < 2`).
    pub fn with_ci(mut self, opts: &CiOptions) -> Result<Self> {
        self.ci_table = if self.m() >= 2 {
            pooled_ci(&self.per_imputation_fits, opts)?
        } else {
            Vec::new()
        };
        Ok(self)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.per_imputation_fits
            .iter()
            .enumerate()
            .flat_map(|(m, f)| f.warnings.iter().map(move |w| format!("imputation {}: {w}", m + 1)))
            .collect()
    }
}

fn mean_coefficients(fits: &[GeeFit]) -> Vec<f64> {
    let k = fits[0].coefficients().len();
    let mut sum = vec![0.0; k];
    for f in fits {
        for (s, c) in sum.iter_mut().zip(f.coefficients()) {
            *s += c;
        }
    }
    sum.into_iter().map(|s| s / fits.len() as f64).collect()
}

fn check_layout(fits: &[GeeFit]) -> Result<()> {
    let first = fits
        .first()
        .ok_or_else(|| Error::Size("pooling needs at least one fit".into()))?;
    for (m, f) in fits.iter().enumerate().skip(1) {
        if f.feature_names != first.feature_names
            || f.covariate_names != first.covariate_names
            || f.link != first.link
        {
            return Err(Error::Integrity(format!(
                "fit {} does not share the coefficient layout of fit 1",
                m + 1
            )));
        }
    }
    Ok(())
}

/// Coordinate-wise mean of the fits' coefficients, embedded into full-width
/// feature and covariate vectors.
pub fn pool_parameters(fits: Vec<GeeFit>, mask: &SelectionMask) -> Result<EnsembleModel> {
    check_layout(&fits)?;
    let first = &fits[0];
    let selected_f = mask.selected_feature_names();
    let selected_c = mask.selected_covariate_names();
    if first.feature_names.iter().map(String::as_str).ne(selected_f.iter().copied())
        || first.covariate_names.iter().map(String::as_str).ne(selected_c.iter().copied())
    {
        return Err(Error::Integrity("fits do not match the selection mask".into()));
    }
    let coefs = mean_coefficients(&fits);
    let p = selected_f.len();

    let mut pooled_feature_coefs = vec![0.0; mask.feature_names.len()];
    for (k, &j) in mask.selected_feature_indices.iter().enumerate() {
        pooled_feature_coefs[j] = coefs[1 + k];
    }
    let mut pooled_covariate_coefs = vec![0.0; mask.covariate_names.len()];
    for (k, &j) in mask.selected_covariate_indices.iter().enumerate() {
        pooled_covariate_coefs[j] = coefs[1 + p + k];
    }

    let ci_table = if fits.len() >= 2 {
        pooled_ci(&fits, &CiOptions::default())?
    } else {
        Vec::new()
    };
    Ok(EnsembleModel {
        link: first.link,
        mask: mask.clone(),
        feature_names: mask.feature_names.clone(),
        covariate_names: mask.covariate_names.clone(),
        selected_features: mask.selected_feature_indices.clone(),
        selected_covariates: mask.selected_covariate_indices.clone(),
        pooled_intercept: coefs[0],
        pooled_feature_coefs,
        pooled_covariate_coefs,
        per_imputation_fits: fits,
        ci_table,
    })
}

fn t_quantile(p: f64, df: Option<f64>) -> Result<f64> {
    match df {
        Some(df) if df.is_finite() => {
            if !(df > 0.0) {
                return Err(Error::Config(format!("degrees of freedom must be positive, got {df}")));
            }
            Ok(StudentsT::new(0.0, 1.0, df)
                .map_err(|e| Error::Config(e.to_string()))?
                .inverse_cdf(p))
        }
        _ => Ok(Normal::standard().inverse_cdf(p)),
    }
}

/// Per-coefficient pooled confidence intervals across `M >= 2` fits.
pub fn pooled_ci(fits: &[GeeFit], opts: &CiOptions) -> Result<Vec<CiRow>> {
    check_layout(fits)?;
    let m = fits.len();
    if m < 2 {
        return Err(Error::UndefinedInterval(
            "pooled intervals need at least two imputations".into(),
        ));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Config(format!("CI level must lie in (0, 1), got {}", opts.level)));
    }
    let mf = m as f64;
    let means = mean_coefficients(fits);
    let names = fits[0].coefficient_names();
    let upper_p = 1.0 - (1.0 - opts.level) / 2.0;

    names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let ss: f64 = fits.iter().map(|f| (f.coefficients()[j] - means[j]).powi(2)).sum();
            let (half, df) = match opts.method {
                CiMethod::BetweenImputation => {
                    let df = opts.df.unwrap_or(mf - 1.0);
                    let s = (ss / mf).sqrt();
                    (t_quantile(upper_p, Some(df))? * s / mf.sqrt(), Some(df))
                }
                CiMethod::Rubin => {
                    let within = fits.iter().map(|f| f.robust_cov[(j, j)]).sum::<f64>() / mf;
                    let between = ss / (mf - 1.0);
                    let inflated = (1.0 + 1.0 / mf) * between;
                    let total = within + inflated;
                    let df = opts.df.or_else(|| {
                        (inflated > 0.0).then(|| (mf - 1.0) * (1.0 + within / inflated).powi(2))
                    });
                    (t_quantile(upper_p, df)? * total.sqrt(), df)
                }
            };
            Ok(CiRow {
                name,
                estimate: means[j],
                lower: means[j] - half,
                upper: means[j] + half,
                level: opts.level,
                df,
            })
        })
        .collect()
}

/// Mean over fits of the per-fit mean predictions (prediction averaging).
/// `ds` must carry exactly the fits' columns.
pub fn average_predictions(fits: &[GeeFit], ds: &LongitudinalDataset) -> Result<Vec<Option<f64>>> {
    check_layout(fits)?;
    let mut acc: Vec<Option<f64>> = vec![Some(0.0); ds.len()];
    for f in fits {
        for (a, p) in acc.iter_mut().zip(predict_mean(f, ds)?) {
            *a = a.zip(p).map(|(s, v)| s + v);
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| a.map(|s| s / fits.len() as f64))
        .collect())
}
