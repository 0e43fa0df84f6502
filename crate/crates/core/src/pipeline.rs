//! Training composition: screen, impute, fit one GEE per imputation, pool.
//!
//! Each stage is exposed on its own so staged runs (impute, then fit) give the
//! same model as [`train_model`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::ensemble::{pool_parameters, CiMethod, CiOptions, EnsembleModel};
use crate::error::{Error, Result};
use crate::gee::{fit_gee, GeeConfig};
use crate::imputation::{mice_pmm, ImputationConfig, ImputedSet};
use crate::selection::{apply_mask, screen_features, select_by_threshold, ScreenMode, SelectionMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Number of features kept. Ignored when `epsilon` is set.
    pub q: usize,
    pub mode: ScreenMode,
    pub epsilon: Option<f64>,
    /// Append every covariate to the selected features.
    pub include_covariates: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            q: 4,
            mode: ScreenMode::default(),
            epsilon: None,
            include_covariates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub ci_level: f64,
    /// Degrees of freedom for the t quantile; `M - 1` when absent.
    pub df: Option<f64>,
    pub rubin_variant: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            ci_level: 0.95,
            df: None,
            rubin_variant: false,
        }
    }
}

impl EnsembleConfig {
    pub fn ci_options(&self) -> CiOptions {
        CiOptions {
            level: self.ci_level,
            df: self.df,
            method: if self.rubin_variant {
                CiMethod::Rubin
            } else {
                CiMethod::BetweenImputation
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!("ensemble.ci_level must lie in (0, 1), got {}", self.ci_level)));
        }
        if let Some(df) = self.df {
            if !(df > 0.0) {
                return Err(Error::Config(format!("ensemble.df must be positive, got {df}")));
            }
        }
        Ok(())
    }
}

/// Everything needed to turn a training dataset into an ensemble model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub imputation: ImputationConfig,
    pub selection: SelectionConfig,
    pub gee: GeeConfig,
    pub ensemble: EnsembleConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.imputation.validate()?;
        self.gee.validate()?;
        self.ensemble.validate()?;
        if let Some(eps) = self.selection.epsilon {
            if !eps.is_finite() || eps < 0.0 {
                return Err(Error::Config(format!("selection.epsilon must be non-negative, got {eps}")));
            }
        }
        Ok(())
    }

    /// The same configuration with a different imputation seed.
    pub fn with_imputation_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.imputation.seed = seed;
        out
    }
}

/// Feature screening on the (unimputed) training data.
pub fn screen(train: &LongitudinalDataset, cfg: &SelectionConfig) -> Result<SelectionMask> {
    let covs: Vec<usize> = if cfg.include_covariates {
        (0..train.n_covariates()).collect()
    } else {
        Vec::new()
    };
    match cfg.epsilon {
        Some(eps) => select_by_threshold(train, eps, &covs, cfg.mode),
        None => screen_features(train, cfg.q, &covs, cfg.mode),
    }
}

/// Fits one GEE per imputed dataset on the masked columns and pools them.
pub fn fit_imputed(imputed: &ImputedSet, mask: &SelectionMask, gee: &GeeConfig, ens: &EnsembleConfig) -> Result<EnsembleModel> {
    let fits = imputed
        .datasets
        .par_iter()
        .map(|ds| fit_gee(&apply_mask(ds, mask)?, gee))
        .collect::<Result<Vec<_>>>()?;
    pool_parameters(fits, mask)?.with_ci(&ens.ci_options())
}

/// Intermediate products of [`train_model_detailed`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub mask: SelectionMask,
    pub imputed: ImputedSet,
    pub model: EnsembleModel,
}

/// Screen, impute, fit and pool. Only `train` is ever imputed.
pub fn train_model_detailed(train: &LongitudinalDataset, cfg: &ModelConfig) -> Result<Trained> {
    cfg.validate()?;
    let mask = screen(train, &cfg.selection)?;
    let imputed = mice_pmm(train, &cfg.imputation)?;
    let model = fit_imputed(&imputed, &mask, &cfg.gee, &cfg.ensemble)?;
    Ok(Trained { mask, imputed, model })
}

pub fn train_model(train: &LongitudinalDataset, cfg: &ModelConfig) -> Result<EnsembleModel> {
    train_model_detailed(train, cfg).map(|t| t.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, GeneratorConfig};

    #[test]
    fn staged_equals_one_shot() {
        let (ds, _) = generate(&GeneratorConfig {
            n_subjects: 30,
            missing_rate: 0.05,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            imputation: ImputationConfig {
                m_imputations: 3,
                n_cycles: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let one = train_model(&ds, &cfg).unwrap();
        let mask = screen(&ds, &cfg.selection).unwrap();
        let imputed = mice_pmm(&ds, &cfg.imputation).unwrap();
        let staged = fit_imputed(&imputed, &mask, &cfg.gee, &cfg.ensemble).unwrap();
        assert_eq!(one, staged);
        assert_eq!(one.m(), 3);
        assert_eq!(one.ci_table.len(), 1 + 4 + 2);
        let names = mask.selected_feature_names();
        assert_eq!(names.len(), 4);
        assert!(names.contains(&"x1") && names.contains(&"x2"));
    }

    #[test]
    fn invalid_config_rejected() {
        let (ds, _) = generate(&GeneratorConfig { n_subjects: 5, ..Default::default() }).unwrap();
        let cfg = ModelConfig {
            ensemble: EnsembleConfig { ci_level: 1.5, ..Default::default() },
            ..Default::default()
        };
        assert_eq!(train_model(&ds, &cfg).unwrap_err().kind(), "config");
    }
}
