use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use longpred::data::{load_csv, missing_fraction, split_by_subject, LongitudinalDataset, Schema, SplitSpec};
use longpred::ensemble::EnsembleModel;
use longpred::evaluation::{bootstrap, evaluate_forecasts, evaluate_split, loocv, EvaluationReport, NoProbe};
use longpred::imputation::{efficiency, imputation_sweep, mice_pmm, ImputedSet};
use longpred::pipeline::{fit_imputed, screen, ModelConfig};
use longpred::prediction::{forecast_dataset, read_forecasts_csv, write_forecasts_csv, SubjectForecast};
use longpred::seed::streams;
use longpred::synthetic::generate;
use longpred::{Error, Result};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::CommandName;

pub fn run(name: CommandName, cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.output_dir()?;
    std::fs::create_dir_all(out)?;
    match name {
        CommandName::Synth => synth(cfg, out)?,
        CommandName::Impute => impute(cfg, out)?,
        CommandName::Fit => fit(cfg, out)?,
        CommandName::Predict => predict(cfg)?,
        CommandName::Evaluate => evaluate(cfg, out)?,
        CommandName::Bootstrap => run_bootstrap(cfg, out)?,
        CommandName::Loocv => run_loocv(cfg, out)?,
        CommandName::Pipeline => pipeline(cfg, out)?,
        CommandName::SweepM => sweep_m(cfg, out)?,
        CommandName::SweepQ => sweep_q(cfg, out)?,
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            command: name.as_str(),
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
        },
    )
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a PipelineConfig,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        let msg = format!("{} does not exist", path.display());
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, msg)))
    }
}

fn load(cfg: &PipelineConfig) -> Result<LongitudinalDataset> {
    let input = existing(cfg.require("paths.input", &cfg.paths.input)?)?;
    let schema = Schema::from_json_file(existing(cfg.require("paths.schema", &cfg.paths.schema)?)?)?;
    load_csv(input, &schema)
}

/// The split every staged command and `pipeline` agree on.
fn split(cfg: &PipelineConfig, ds: &LongitudinalDataset) -> Result<SplitSpec> {
    let h = cfg.harness();
    split_by_subject(ds, h.evaluation.train_fraction, h.split_seed(0))
}

/// Model configuration with the imputation seed `pipeline` uses.
fn model_config(cfg: &PipelineConfig) -> ModelConfig {
    let h = cfg.harness();
    h.model.with_imputation_seed(h.imputation_seed(streams::IMPUTATION, 0))
}

fn write_forecasts(path: &Path, forecasts: &[SubjectForecast]) -> Result<()> {
    write_forecasts_csv(forecasts, BufWriter::new(File::create(path)?))
}

/// Evaluation report with the model's fitting warnings prepended.
fn with_model_warnings(mut report: EvaluationReport, model: &EnsembleModel) -> EvaluationReport {
    let mut warnings = model.warnings();
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    report
}

fn synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let mut gen = cfg.synth.clone();
    gen.seed = cfg.seed;
    let (ds, truth) = generate(&gen)?;
    ds.write_csv(out.join("data.csv"))?;
    write_json(&out.join("schema.json"), &ds.schema())?;
    truth.write_json(out.join("truth.json"))
}

#[derive(Serialize)]
struct SplitFile<'a> {
    seed: u64,
    train_subjects: &'a BTreeSet<String>,
    test_subjects: &'a BTreeSet<String>,
}

#[derive(Serialize)]
struct ImputeReport {
    n_train_subjects: usize,
    n_test_subjects: usize,
    m_imputations: usize,
    missing_fraction: f64,
    efficiency: f64,
    imputed_cells: usize,
}

fn impute(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load(cfg)?;
    let split = split(cfg, &ds)?;
    let train = split.train(&ds);
    let model_cfg = model_config(cfg);
    let set = mice_pmm(&train, &model_cfg.imputation)?;
    set.write_to_dir(cfg.imputed_dir()?)?;
    write_json(
        &out.join("split.json"),
        &SplitFile {
            seed: split.seed,
            train_subjects: &split.train_subjects,
            test_subjects: &split.test_subjects,
        },
    )?;
    let gamma = missing_fraction(&train)?;
    write_json(
        &out.join("impute.json"),
        &ImputeReport {
            n_train_subjects: split.train_subjects.len(),
            n_test_subjects: split.test_subjects.len(),
            m_imputations: set.m(),
            missing_fraction: gamma,
            efficiency: efficiency(gamma, set.m())?,
            imputed_cells: set.imputed_cells.len(),
        },
    )
}

fn fit(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load(cfg)?;
    let split = split(cfg, &ds)?;
    let train = split.train(&ds);
    let imputed = ImputedSet::read_from_dir(existing(&cfg.imputed_dir()?)?)?;
    let model_cfg = model_config(cfg);
    let mask = screen(&train, &model_cfg.selection)?;
    let model = fit_imputed(&imputed, &mask, &model_cfg.gee, &model_cfg.ensemble)?;
    write_json(&out.join("features.json"), &mask)?;
    write_json(&cfg.model_path()?, &model)
}

fn predict(cfg: &PipelineConfig) -> Result<()> {
    let ds = load(cfg)?;
    let test = split(cfg, &ds)?.test(&ds);
    let model: EnsembleModel = read_json(existing(&cfg.model_path()?)?)?;
    let forecasts = forecast_dataset(&model, &test, cfg.prediction.fine_tune, &cfg.prediction.options());
    write_forecasts(&cfg.predictions_path()?, &forecasts)
}

fn evaluate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let forecasts = read_forecasts_csv(File::open(existing(&cfg.predictions_path()?)?)?)?;
    let mut report = evaluate_forecasts(&forecasts, &cfg.prediction, cfg.evaluation.tau)?;
    let model_path = cfg.model_path()?;
    if model_path.exists() {
        let model: EnsembleModel = read_json(&model_path)?;
        report = with_model_warnings(report, &model);
    }
    write_json(&out.join("report.json"), &report)
}

fn pipeline(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load(cfg)?;
    let run = evaluate_split(&ds, &cfg.harness(), &NoProbe)?;
    write_json(&out.join("features.json"), &run.mask)?;
    write_json(&cfg.model_path()?, &run.model)?;
    write_forecasts(&cfg.predictions_path()?, &run.forecasts)?;
    write_json(&out.join("report.json"), &with_model_warnings(run.report, &run.model))
}

fn run_bootstrap(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load(cfg)?;
    let report = bootstrap(&ds, &cfg.harness(), &NoProbe)?;
    report.write_csv(BufWriter::new(File::create(out.join("bootstrap.csv"))?))?;
    write_json(&out.join("features.json"), &report.feature_frequency)?;
    write_json(&out.join("report.json"), &report)
}

fn run_loocv(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load(cfg)?;
    let report = loocv(&ds, &cfg.harness(), &NoProbe)?;
    write_forecasts(&cfg.predictions_path()?, &report.forecasts)?;
    write_json(&out.join("report.json"), &report)
}

#[derive(Serialize)]
struct SweepMRow {
    m: usize,
    accuracy: f64,
    efficiency: f64,
}

fn sweep_m(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load(cfg)?;
    let split = split(cfg, &ds)?;
    let (train, test) = (split.train(&ds), split.test(&ds));
    let model_cfg = model_config(cfg);
    let mask = screen(&train, &model_cfg.selection)?;
    let gamma = missing_fraction(&train)?;
    let rows = imputation_sweep(&train, &model_cfg.imputation, &cfg.sweep.m_values, |set| {
        let model = fit_imputed(set, &mask, &model_cfg.gee, &model_cfg.ensemble)?;
        let forecasts = forecast_dataset(&model, &test, false, &cfg.prediction.options());
        let report = evaluate_forecasts(&forecasts, &cfg.prediction, cfg.evaluation.tau)?;
        report
            .raw
            .pearson_r
            .ok_or_else(|| Error::Undefined("test correlation is undefined".into()))
    })?;
    let rows = rows
        .into_iter()
        .map(|r| {
            Ok(SweepMRow {
                m: r.m,
                accuracy: r.accuracy,
                efficiency: efficiency(gamma, r.m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_table(&out.join("sweep_m.csv"), &rows)?;
    write_json(&out.join("report.json"), &rows)
}

#[derive(Serialize)]
struct SweepQRow {
    q: usize,
    raw_r: Option<f64>,
    adjusted_r: Option<f64>,
    raw_mse: f64,
    adjusted_mse: Option<f64>,
    n_scored_rows: usize,
}

fn sweep_q(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load(cfg)?;
    let q_values: Vec<usize> = if cfg.sweep.q_values.is_empty() {
        (1..=ds.n_features()).collect()
    } else {
        cfg.sweep.q_values.clone()
    };
    if let Some(&bad) = q_values.iter().find(|&&q| q > ds.n_features()) {
        return Err(Error::Config(format!(
            "sweep.q_values entry {bad} exceeds the {} available features",
            ds.n_features()
        )));
    }
    let split = split(cfg, &ds)?;
    let (train, test) = (split.train(&ds), split.test(&ds));
    let base = model_config(cfg);
    let imputed = mice_pmm(&train, &base.imputation)?;
    let mut rows = Vec::with_capacity(q_values.len());
    for q in q_values {
        let mut selection = base.selection.clone();
        selection.q = q;
        selection.epsilon = None;
        let mask = screen(&train, &selection)?;
        let model = fit_imputed(&imputed, &mask, &base.gee, &base.ensemble)?;
        let forecasts = forecast_dataset(&model, &test, cfg.prediction.fine_tune, &cfg.prediction.options());
        let report = evaluate_forecasts(&forecasts, &cfg.prediction, cfg.evaluation.tau)?;
        rows.push(SweepQRow {
            q,
            raw_r: report.raw.pearson_r,
            adjusted_r: report.adjusted.as_ref().and_then(|m| m.pearson_r),
            raw_mse: report.raw.mse,
            adjusted_mse: report.adjusted.as_ref().map(|m| m.mse),
            n_scored_rows: report.raw.n_pairs,
        });
    }
    write_table(&out.join("sweep_q.csv"), &rows)?;
    write_json(&out.join("report.json"), &rows)
}

fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
