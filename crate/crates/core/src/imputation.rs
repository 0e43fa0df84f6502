//! Multiple imputation by chained equations with predictive mean matching.
//!
//! Each of the `M` imputations starts from column means and then cycles
//! through the incomplete columns, regressing each one on every other column
//! and filling its gaps with observed donor values whose fitted values lie
//! nearest the missing row's fitted value.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, LongitudinalDataset, Observation, Schema};
use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputationConfig {
    pub m_imputations: usize,
    pub n_cycles: usize,
    pub n_donors: usize,
    pub seed: u64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            m_imputations: 15,
            n_cycles: 10,
            n_donors: 5,
            seed: 0,
        }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m_imputations", self.m_imputations),
            ("n_cycles", self.n_cycles),
            ("n_donors", self.n_donors),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// A cell that was absent in the source data and filled by imputation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputedCell {
    pub subject: String,
    pub time: u32,
    pub column: String,
}

/// `M` completed copies of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedSet {
    pub datasets: Vec<LongitudinalDataset>,
    pub imputed_cells: Vec<ImputedCell>,
    pub config: ImputationConfig,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    m: usize,
    cycles: usize,
    donors: usize,
    schema: Schema,
    files: Vec<String>,
    imputed_cells: Vec<ImputedCell>,
}

pub const MANIFEST_FILE: &str = "imputation.json";

impl ImputedSet {
    pub fn m(&self) -> usize {
        self.datasets.len()
    }

    /// Writes `imputed_XX.csv` files plus a JSON manifest into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let width = self.m().to_string().len().max(2);
        let mut files = Vec::with_capacity(self.m());
        for (i, ds) in self.datasets.iter().enumerate() {
            let name = format!("imputed_{:0width$}.csv", i + 1);
            ds.write_csv(dir.join(&name))?;
            files.push(name);
        }
        let schema = self
            .datasets
            .first()
            .map(LongitudinalDataset::schema)
            .ok_or_else(|| Error::Size("imputed set is empty".into()))?;
        let manifest = Manifest {
            seed: self.config.seed,
            m: self.config.m_imputations,
            cycles: self.config.n_cycles,
            donors: self.config.n_donors,
            schema,
            files,
            imputed_cells: self.imputed_cells.clone(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read_from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let datasets = manifest
            .files
            .iter()
            .map(|f| load_csv(dir.join(f), &manifest.schema))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            datasets,
            imputed_cells: manifest.imputed_cells,
            config: ImputationConfig {
                m_imputations: manifest.m,
                n_cycles: manifest.cycles,
                n_donors: manifest.donors,
                seed: manifest.seed,
            },
        })
    }
}

/// Flat column view: features, then covariates, then the outcome.
struct Columns {
    n_rows: usize,
    n_cols: usize,
    values: Vec<Vec<Option<f64>>>,
    names: Vec<String>,
}

impl Columns {
    fn from_dataset(ds: &LongitudinalDataset) -> Self {
        let p = ds.n_features();
        let c = ds.n_covariates();
        let n_cols = p + c + 1;
        let mut values = vec![Vec::with_capacity(ds.len()); n_cols];
        for obs in ds.observations() {
            for (j, v) in obs.features.iter().enumerate() {
                values[j].push(*v);
            }
            for (j, v) in obs.covariates.iter().enumerate() {
                values[p + j].push(*v);
            }
            values[p + c].push(obs.outcome);
        }
        let mut names: Vec<String> = ds.feature_names().to_vec();
        names.extend(ds.covariate_names().iter().cloned());
        names.push(ds.outcome_name().to_string());
        Self {
            n_rows: ds.len(),
            n_cols,
            values,
            names,
        }
    }
}

/// Runs `M` independent chained-equation imputations with predictive mean
/// matching. Observed cells are copied through untouched.
pub fn mice_pmm(ds: &LongitudinalDataset, cfg: &ImputationConfig) -> Result<ImputedSet> {
    cfg.validate()?;
    let cols = Columns::from_dataset(ds);

    let mut incomplete: Vec<(usize, usize)> = Vec::new();
    for (j, col) in cols.values.iter().enumerate() {
        let n_missing = col.iter().filter(|v| v.is_none()).count();
        if n_missing == 0 {
            continue;
        }
        let n_observed = cols.n_rows - n_missing;
        if n_observed == 0 {
            return Err(Error::Unimputable {
                column: cols.names[j].clone(),
            });
        }
        if n_observed < cfg.n_donors {
            return Err(Error::Config(format!(
                "column `{}` has {n_observed} observed values, fewer than n_donors = {}",
                cols.names[j], cfg.n_donors
            )));
        }
        incomplete.push((n_missing, j));
    }
    // ascending missing count, ties by column index
    incomplete.sort_unstable();
    let order: Vec<usize> = incomplete.iter().map(|&(_, j)| j).collect();

    let imputed_cells = imputed_cells(ds, &cols);
    if order.is_empty() {
        return Ok(ImputedSet {
            datasets: vec![ds.clone(); cfg.m_imputations],
            imputed_cells,
            config: *cfg,
        });
    }

    let datasets = (0..cfg.m_imputations)
        .into_par_iter()
        .map(|m| {
            let mut rng = seed::rng(cfg.seed, seed::streams::IMPUTATION, m as u64);
            let filled = impute_once(&cols, &order, cfg, &mut rng)?;
            rebuild(ds, &filled)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ImputedSet {
        datasets,
        imputed_cells,
        config: *cfg,
    })
}

fn imputed_cells(ds: &LongitudinalDataset, cols: &Columns) -> Vec<ImputedCell> {
    let mut cells = Vec::new();
    for (i, obs) in ds.observations().iter().enumerate() {
        for j in 0..cols.n_cols {
            if cols.values[j][i].is_none() {
                cells.push(ImputedCell {
                    subject: obs.subject.clone(),
                    time: obs.time,
                    column: cols.names[j].clone(),
                });
            }
        }
    }
    cells
}

/// One chained-equation imputation; returns the completed `n_rows x n_cols` matrix.
fn impute_once<R: Rng>(
    cols: &Columns,
    order: &[usize],
    cfg: &ImputationConfig,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = cols.n_rows;
    let k = cols.n_cols;
    let mut work = DMatrix::<f64>::zeros(n, k);
    for j in 0..k {
        let observed: Vec<f64> = cols.values[j].iter().flatten().copied().collect();
        let mean = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for i in 0..n {
            work[(i, j)] = cols.values[j][i].unwrap_or(mean);
        }
    }

    // design: intercept followed by every column except the target
    let mut design = DMatrix::<f64>::zeros(n, k);
    for _cycle in 0..cfg.n_cycles {
        for &target in order {
            design.column_mut(0).fill(1.0);
            for (c, j) in (1..).zip((0..k).filter(|&j| j != target)) {
                design.set_column(c, &work.column(j));
            }
            let observed_rows: Vec<usize> = (0..n).filter(|&i| cols.values[target][i].is_some()).collect();
            let x_obs = design.select_rows(observed_rows.iter());
            let y_obs = DVector::from_iterator(
                observed_rows.len(),
                observed_rows.iter().map(|&i| cols.values[target][i].unwrap_or_default()),
            );
            let beta = least_squares(&x_obs, &y_obs).map_err(|_| {
                Error::DegenerateDesign(format!(
                    "predictors of column `{}` are rank deficient",
                    cols.names[target]
                ))
            })?;
            let fitted = &design * &beta;

            let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(observed_rows.len());
            for i in (0..n).filter(|&i| cols.values[target][i].is_none()) {
                candidates.clear();
                candidates.extend(observed_rows.iter().map(|&r| ((fitted[r] - fitted[i]).abs(), r)));
                let donors = nearest(&mut candidates, cfg.n_donors);
                let donor = donors[rng.random_range(0..donors.len())].1;
                work[(i, target)] = cols.values[target][donor].unwrap_or_default();
            }
        }
    }
    Ok(work)
}

/// The `k` candidates with smallest distance, ties broken by row index.
fn nearest(candidates: &mut [(f64, usize)], k: usize) -> &[(f64, usize)] {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(candidates.len());
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
    }
    let head = &mut candidates[..k];
    head.sort_unstable_by(cmp);
    head
}

fn rebuild(ds: &LongitudinalDataset, filled: &DMatrix<f64>) -> Result<LongitudinalDataset> {
    let p = ds.n_features();
    let c = ds.n_covariates();
    let observations = ds
        .observations()
        .iter()
        .enumerate()
        .map(|(i, obs)| Observation {
            subject: obs.subject.clone(),
            time: obs.time,
            features: (0..p).map(|j| Some(obs.features[j].unwrap_or(filled[(i, j)]))).collect(),
            covariates: (0..c)
                .map(|j| Some(obs.covariates[j].unwrap_or(filled[(i, p + j)])))
                .collect(),
            outcome: Some(obs.outcome.unwrap_or(filled[(i, p + c)])),
        })
        .collect();
    ds.with_observations(observations)
}

/// Relative efficiency of `m` imputations at missing fraction `gamma`:
/// `(1 + gamma / m)^-1`.
pub fn efficiency(gamma: f64, m: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("missing fraction {gamma} outside [0, 1]")));
    }
    if m == 0 {
        return Err(Error::Domain("number of imputations must be at least 1".into()));
    }
    Ok(1.0 / (1.0 + gamma / m as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub accuracy: f64,
}

/// Imputes `ds` once per entry of `m_values` and tabulates the accuracy the
/// callback reports for each imputed set.
pub fn imputation_sweep<F>(
    ds: &LongitudinalDataset,
    base: &ImputationConfig,
    m_values: &[usize],
    mut fit_eval: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&ImputedSet) -> Result<f64>,
{
    if m_values.is_empty() {
        return Err(Error::Config("m_values must not be empty".into()));
    }
    if let Some(&bad) = m_values.iter().find(|&&m| m == 0) {
        return Err(Error::Config(format!("m_values entries must be >= 1, got {bad}")));
    }
    m_values
        .iter()
        .map(|&m| {
            let cfg = ImputationConfig {
                m_imputations: m,
                ..*base
            };
            let wrap = |e: Error| Error::Sweep { m, source: Box::new(e) };
            let set = mice_pmm(ds, &cfg).map_err(wrap)?;
            let accuracy = fit_eval(&set).map_err(wrap)?;
            Ok(SweepRow { m, accuracy })
        })
        .collect()
}
