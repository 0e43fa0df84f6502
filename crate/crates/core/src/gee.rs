//! Marginal-model fitting by generalized estimating equations.
//!
//! The mean model is `g(E[y_it]) = intercept + x_it' * feature_coefs + z_i' * covariate_coefs`
//! with constant variance function and a working correlation `R_i(alpha)`
//! per subject. Coefficients are found by Fisher scoring on the quasi-score
//! `sum_i D_i' V_i^-1 (y_i - mu_i) = 0`; nuisance parameters (dispersion and
//! the working-correlation parameter) are re-estimated by moments before every
//! step. Inference uses the robust sandwich `B^-1 M B^-1`.
//!
//! Internally the design is standardized (column mean/sd over the training
//! rows); reported coefficients and covariances are mapped back to the raw
//! column scale, so predictions on new rows need no extra transform.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, ScaledCholesky};

/// Link function `g` of the mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Identity,
    Logit,
}

impl Link {
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => mu.ln() - (-mu).ln_1p(),
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// d mu / d eta.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let mu = self.inverse(eta);
                mu * (1.0 - mu)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkingKind {
    Independence,
    #[default]
    Exchangeable,
    Ar1,
}

/// Working correlation structure and its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelation {
    pub kind: WorkingKind,
    pub alpha: f64,
}

impl WorkingCorrelation {
    pub fn new(kind: WorkingKind, alpha: f64) -> Self {
        Self { kind, alpha }
    }

    /// Open interval of admissible `alpha` for clusters up to `max_t` rows.
    pub fn valid_range(kind: WorkingKind, max_t: usize) -> (f64, f64) {
        match kind {
            WorkingKind::Independence => (0.0, 0.0),
            WorkingKind::Exchangeable if max_t > 1 => (-1.0 / (max_t as f64 - 1.0), 1.0),
            WorkingKind::Exchangeable => (-1.0, 1.0),
            WorkingKind::Ar1 => (-1.0, 1.0),
        }
    }

    /// `R(alpha)` for a cluster of `t` rows.
    pub fn matrix(&self, t: usize) -> DMatrix<f64> {
        let a = self.alpha;
        DMatrix::from_fn(t, t, |i, j| {
            if i == j {
                return 1.0;
            }
            match self.kind {
                WorkingKind::Independence => 0.0,
                WorkingKind::Exchangeable => a,
                WorkingKind::Ar1 => a.powi(i.abs_diff(j) as i32),
            }
        })
    }

    /// Closed-form `R(alpha)^-1` for a cluster of `t` rows.
    pub fn inverse(&self, t: usize) -> DMatrix<f64> {
        let a = self.alpha;
        match self.kind {
            WorkingKind::Independence => DMatrix::identity(t, t),
            WorkingKind::Exchangeable => {
                let c = 1.0 / (1.0 - a);
                let d = a / (1.0 - a + t as f64 * a);
                DMatrix::from_fn(t, t, |i, j| c * (f64::from(u8::from(i == j)) - d))
            }
            WorkingKind::Ar1 => {
                let c = 1.0 / (1.0 - a * a);
                DMatrix::from_fn(t, t, |i, j| {
                    if i == j {
                        if t == 1 {
                            1.0
                        } else if i == 0 || i == t - 1 {
                            c
                        } else {
                            c * (1.0 + a * a)
                        }
                    } else if i.abs_diff(j) == 1 {
                        -a * c
                    } else {
                        0.0
                    }
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeeConfig {
    pub link: Link,
    pub working: WorkingKind,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GeeConfig {
    fn default() -> Self {
        Self {
            link: Link::Identity,
            working: WorkingKind::Exchangeable,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

impl GeeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of one GEE fit, on the raw column scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub link: Link,
    pub working: WorkingCorrelation,
    pub intercept: f64,
    pub feature_names: Vec<String>,
    pub feature_coefs: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub covariate_coefs: Vec<f64>,
    pub dispersion: f64,
    /// Sandwich covariance over `[intercept, features.., covariates..]`.
    pub robust_cov: DMatrix<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl GeeFit {
    /// Coefficients in `[intercept, features.., covariates..]` order.
    pub fn coefficients(&self) -> Vec<f64> {
        std::iter::once(self.intercept)
            .chain(self.feature_coefs.iter().copied())
            .chain(self.covariate_coefs.iter().copied())
            .collect()
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once("(intercept)".to_string())
            .chain(self.feature_names.iter().cloned())
            .chain(self.covariate_names.iter().cloned())
            .collect()
    }

    pub fn robust_se(&self) -> Vec<f64> {
        self.robust_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// `g^-1(intercept + x' alpha + z' gamma)` for one row.
    pub fn predict_row(&self, features: &[f64], covariates: &[f64]) -> f64 {
        debug_assert_eq!(features.len(), self.feature_coefs.len());
        debug_assert_eq!(covariates.len(), self.covariate_coefs.len());
        let eta = self.intercept
            + dot(features, &self.feature_coefs)
            + dot(covariates, &self.covariate_coefs);
        self.link.inverse(eta)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Serialize, Deserialize)]
struct CoefsWire {
    intercept: f64,
    features: indexmap::IndexMap<String, f64>,
    covariates: indexmap::IndexMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct GeeFitWire {
    link: Link,
    working: WorkingCorrelation,
    coefs: CoefsWire,
    robust_cov: Vec<Vec<f64>>,
    converged: bool,
    iterations: usize,
    dispersion: f64,
    #[serde(default)]
    warnings: Vec<String>,
}

impl Serialize for GeeFit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let k = self.robust_cov.nrows();
        GeeFitWire {
            link: self.link,
            working: self.working,
            coefs: CoefsWire {
                intercept: self.intercept,
                features: self.feature_names.iter().cloned().zip(self.feature_coefs.iter().copied()).collect(),
                covariates: self
                    .covariate_names
                    .iter()
                    .cloned()
                    .zip(self.covariate_coefs.iter().copied())
                    .collect(),
            },
            robust_cov: (0..k).map(|i| (0..k).map(|j| self.robust_cov[(i, j)]).collect()).collect(),
            converged: self.converged,
            iterations: self.n_iterations,
            dispersion: self.dispersion,
            warnings: self.warnings.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GeeFit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let w = GeeFitWire::deserialize(d)?;
        let k = 1 + w.coefs.features.len() + w.coefs.covariates.len();
        if w.robust_cov.len() != k || w.robust_cov.iter().any(|r| r.len() != k) {
            return Err(D::Error::custom(format!("robust_cov must be {k}x{k}")));
        }
        Ok(Self {
            link: w.link,
            working: w.working,
            intercept: w.coefs.intercept,
            feature_names: w.coefs.features.keys().cloned().collect(),
            feature_coefs: w.coefs.features.values().copied().collect(),
            covariate_names: w.coefs.covariates.keys().cloned().collect(),
            covariate_coefs: w.coefs.covariates.values().copied().collect(),
            dispersion: w.dispersion,
            robust_cov: DMatrix::from_fn(k, k, |i, j| w.robust_cov[i][j]),
            n_iterations: w.iterations,
            converged: w.converged,
            warnings: w.warnings,
        })
    }
}

/// Design pieces in standardized form plus the map back to raw scale.
struct Design {
    x: DMatrix<f64>,
    y: DVector<f64>,
    clusters: Vec<(usize, usize)>,
    means: Vec<f64>,
    sds: Vec<f64>,
    names: Vec<String>,
}

fn build_design(ds: &LongitudinalDataset) -> Result<Design> {
    if !ds.is_complete() {
        return Err(Error::Integrity(format!(
            "GEE fitting needs complete data; {} cells missing",
            ds.n_missing()
        )));
    }
    let n = ds.len();
    let p = ds.n_features();
    let c = ds.n_covariates();
    let k = 1 + p + c;
    let mut names = vec!["(intercept)".to_string()];
    names.extend(ds.feature_names().iter().cloned());
    names.extend(ds.covariate_names().iter().cloned());
    if n <= k {
        return Err(Error::DegenerateDesign(format!(
            "{n} rows cannot identify {k} coefficients"
        )));
    }

    let mut x = DMatrix::<f64>::zeros(n, k);
    let mut y = DVector::<f64>::zeros(n);
    for (i, o) in ds.observations().iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, v) in o.features.iter().chain(&o.covariates).enumerate() {
            x[(i, 1 + j)] = v.unwrap_or_default();
        }
        y[i] = o.outcome.unwrap_or_default();
    }
    let mut means = vec![0.0; k];
    let mut sds = vec![1.0; k];
    for j in 1..k {
        let col = x.column(j);
        let m = col.mean();
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateDesign(format!(
                "column `{}` is constant and collinear with the intercept",
                names[j]
            )));
        }
        means[j] = m;
        sds[j] = var.sqrt();
        for i in 0..n {
            x[(i, j)] = (x[(i, j)] - m) / sds[j];
        }
    }
    let clusters = ds
        .subject_ranges()
        .into_iter()
        .map(|(_, r)| (r.start, r.len()))
        .collect();
    Ok(Design {
        x,
        y,
        clusters,
        means,
        sds,
        names,
    })
}

fn degenerate(names: &[String], column: usize) -> Error {
    Error::DegenerateDesign(format!(
        "design is rank deficient at column `{}`",
        names.get(column).map_or("?", String::as_str)
    ))
}

/// Moment estimates of dispersion and working-correlation parameter.
fn estimate_nuisance(
    design: &Design,
    resid: &DVector<f64>,
    kind: WorkingKind,
    max_t: usize,
    warnings: &mut Vec<String>,
) -> (f64, f64) {
    let n = resid.len();
    let k = design.x.ncols();
    let df = if n > k { n - k } else { n };
    let phi = resid.iter().map(|e| e * e).sum::<f64>() / df as f64;
    if kind == WorkingKind::Independence || !(phi > f64::EPSILON) {
        return (phi, 0.0);
    }
    let (mut sum, mut pairs) = (0.0, 0usize);
    for &(start, t) in &design.clusters {
        let e = resid.rows(start, t);
        match kind {
            WorkingKind::Exchangeable => {
                let s: f64 = e.sum();
                let ss: f64 = e.iter().map(|v| v * v).sum();
                sum += 0.5 * (s * s - ss);
                pairs += t * (t - 1) / 2;
            }
            WorkingKind::Ar1 => {
                for l in 1..t {
                    sum += e[l] * e[l - 1];
                }
                pairs += t.saturating_sub(1);
            }
            WorkingKind::Independence => unreachable!(),
        }
    }
    if pairs == 0 {
        return (phi, 0.0);
    }
    let alpha = sum / pairs as f64 / phi;
    let (lo, hi) = WorkingCorrelation::valid_range(kind, max_t);
    let clamped = if alpha <= lo {
        lo + 1e-6
    } else if alpha >= hi {
        hi - 1e-6
    } else {
        alpha
    };
    if clamped != alpha {
        let msg = format!(
            "working correlation estimate {alpha:.6} outside ({lo:.6}, {hi:.6}); clamped to {clamped:.6}"
        );
        if !warnings.contains(&msg) {
            warnings.push(msg);
        }
    }
    (phi, clamped)
}

/// Per-cluster accumulation of `B = sum D' R^-1 D`, `U = sum D' R^-1 r` and,
/// when requested, the sandwich meat `M = sum (D' R^-1 r)(D' R^-1 r)'`.
fn accumulate(
    design: &Design,
    eta: &DVector<f64>,
    resid: &DVector<f64>,
    link: Link,
    working: WorkingCorrelation,
    with_meat: bool,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let k = design.x.ncols();
    let mut bread = DMatrix::<f64>::zeros(k, k);
    let mut score = DVector::<f64>::zeros(k);
    let mut meat = DMatrix::<f64>::zeros(k, k);
    let mut inverses: Vec<Option<DMatrix<f64>>> = Vec::new();
    for &(start, t) in &design.clusters {
        if inverses.len() <= t {
            inverses.resize(t + 1, None);
        }
        let r_inv = inverses[t].get_or_insert_with(|| working.inverse(t));
        let mut d = design.x.rows(start, t).clone_owned();
        if link != Link::Identity {
            for i in 0..t {
                let w = link.mu_eta(eta[start + i]);
                d.row_mut(i).scale_mut(w);
            }
        }
        let dt_rinv = d.transpose() * &*r_inv;
        bread += &dt_rinv * &d;
        let u = &dt_rinv * resid.rows(start, t);
        score += &u;
        if with_meat {
            meat += &u * u.transpose();
        }
    }
    (bread, score, meat)
}

/// Fits the marginal model to a complete dataset whose columns are exactly
/// the model terms (apply a selection mask first).
pub fn fit_gee(train: &LongitudinalDataset, cfg: &GeeConfig) -> Result<GeeFit> {
    cfg.validate()?;
    let design = build_design(train)?;
    let k = design.x.ncols();
    let max_t = design.clusters.iter().map(|c| c.1).max().unwrap_or(1);
    let link = cfg.link;
    let mut warnings = Vec::new();

    let xtx = design.x.tr_mul(&design.x);
    let xtx_chol = ScaledCholesky::new(&xtx).map_err(|e| degenerate(&design.names, e.column))?;
    let mut beta = match link {
        Link::Identity => xtx_chol.solve(&design.x.tr_mul(&design.y)),
        Link::Logit => {
            let ybar = design.y.mean().clamp(1e-6, 1.0 - 1e-6);
            let mut b = DVector::zeros(k);
            b[0] = link.link(ybar);
            b
        }
    };

    let residuals = |beta: &DVector<f64>| {
        let eta = &design.x * beta;
        let resid = DVector::from_fn(eta.len(), |i, _| design.y[i] - link.inverse(eta[i]));
        (eta, resid)
    };

    let mut working = WorkingCorrelation::new(cfg.working, 0.0);
    let mut converged = false;
    let mut n_iterations = 0;
    for iter in 1..=cfg.max_iter {
        let (eta, resid) = residuals(&beta);
        let (_, alpha) = estimate_nuisance(&design, &resid, cfg.working, max_t, &mut warnings);
        working.alpha = alpha;
        let (bread, score, _) = accumulate(&design, &eta, &resid, link, working, false);
        let chol = ScaledCholesky::new(&bread).map_err(|e| degenerate(&design.names, e.column))?;
        let step = chol.solve(&score);
        beta += &step;
        n_iterations = iter;
        if step.amax() < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "GEE did not converge within {} iterations (tol {:e})",
            cfg.max_iter, cfg.tol
        ));
    }

    let (eta, resid) = residuals(&beta);
    let (phi, alpha) = estimate_nuisance(&design, &resid, cfg.working, max_t, &mut warnings);
    working.alpha = alpha;
    let (bread, _, meat) = accumulate(&design, &eta, &resid, link, working, true);
    let bread_inv = ScaledCholesky::new(&bread)
        .map_err(|e| degenerate(&design.names, e.column))?
        .inverse();
    let mut cov_std = &bread_inv * meat * &bread_inv;
    symmetrize(&mut cov_std);

    // raw = A * standardized
    let mut a = DMatrix::<f64>::identity(k, k);
    for j in 1..k {
        a[(j, j)] = 1.0 / design.sds[j];
        a[(0, j)] = -design.means[j] / design.sds[j];
    }
    let raw = &a * &beta;
    let mut robust_cov = &a * cov_std * a.transpose();
    symmetrize(&mut robust_cov);

    let p = train.n_features();
    Ok(GeeFit {
        link,
        working,
        intercept: raw[0],
        feature_names: train.feature_names().to_vec(),
        feature_coefs: raw.rows(1, p).iter().copied().collect(),
        covariate_names: train.covariate_names().to_vec(),
        covariate_coefs: raw.rows(1 + p, k - 1 - p).iter().copied().collect(),
        dispersion: phi,
        robust_cov,
        n_iterations,
        converged,
        warnings,
    })
}

/// Mean predictions for every row of `ds`; rows with a missing model cell
/// yield `None`. Column names must match the fit.
pub fn predict_mean(fit: &GeeFit, ds: &LongitudinalDataset) -> Result<Vec<Option<f64>>> {
    if ds.feature_names() != fit.feature_names.as_slice() || ds.covariate_names() != fit.covariate_names.as_slice() {
        return Err(Error::Integrity("prediction rows do not match the fitted model's columns".into()));
    }
    Ok(ds
        .observations()
        .iter()
        .map(|o| {
            let x: Option<Vec<f64>> = o.features.iter().copied().collect();
            let z: Option<Vec<f64>> = o.covariates.iter().copied().collect();
            Some(fit.predict_row(&x?, &z?))
        })
        .collect())
}
