mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use longpred::Error;
use serde_json::json;

use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "longpred", version, about = "Longitudinal outcome prediction with imputation and GEE ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandName {
    Synth,
    Impute,
    Fit,
    Predict,
    Evaluate,
    Bootstrap,
    Loocv,
    Pipeline,
    SweepM,
    SweepQ,
}

impl CommandName {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandName::Synth => "synth",
            CommandName::Impute => "impute",
            CommandName::Fit => "fit",
            CommandName::Predict => "predict",
            CommandName::Evaluate => "evaluate",
            CommandName::Bootstrap => "bootstrap",
            CommandName::Loocv => "loocv",
            CommandName::Pipeline => "pipeline",
            CommandName::SweepM => "sweep-m",
            CommandName::SweepQ => "sweep-q",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(Common),
    /// Split the data and impute the training subjects.
    Impute(Common),
    /// Screen features and fit one GEE per imputed dataset.
    Fit(Common),
    /// Forecast the held-out subjects with a fitted model.
    Predict(Common),
    /// Score a forecast table.
    Evaluate(Common),
    /// Subject-level bootstrap of the whole pipeline.
    Bootstrap(Common),
    /// Leave-one-subject-out cross-validation.
    Loocv(Common),
    /// Impute, screen, fit, pool, forecast, fine-tune and evaluate in one run.
    Pipeline(Common),
    /// Accuracy across numbers of imputations.
    SweepM(Common),
    /// Accuracy across numbers of selected features.
    SweepQ(Common),
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; output does not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of imputations.
    #[arg(long)]
    m: Option<usize>,
    /// Number of selected features.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    train_fraction: Option<f64>,
    /// Comma-separated imputation counts for `sweep-m`.
    #[arg(long, value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
    /// Comma-separated feature counts for `sweep-q`.
    #[arg(long, value_delimiter = ',')]
    q_values: Option<Vec<usize>>,
    /// Override any config field, e.g. `--set gee.working=ar1`. Repeatable.
    #[arg(long = "set", value_name = "FIELD=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected FIELD=VALUE, got `{s}`"))
}

impl Common {
    /// Named flags first, then `--set` assignments; all of them beat the file.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p).to_string());
        push("seed", self.seed.map(|v| v.to_string()));
        push("paths.input", path(&self.input));
        push("paths.schema", path(&self.schema));
        push("paths.output", path(&self.output));
        push("imputation.m_imputations", self.m.map(|v| v.to_string()));
        push("selection.q", self.q.map(|v| v.to_string()));
        push("evaluation.n_boot", self.n_boot.map(|v| v.to_string()));
        push("evaluation.tau", self.tau.map(|v| json!(v).to_string()));
        push("evaluation.train_fraction", self.train_fraction.map(|v| json!(v).to_string()));
        push("sweep.m_values", self.m_values.as_ref().map(|v| json!(v).to_string()));
        push("sweep.q_values", self.q_values.as_ref().map(|v| json!(v).to_string()));
        out.extend(self.set.iter().cloned());
        out
    }

    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let base = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                PipelineConfig::from_json(&text)?
            }
            None => PipelineConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Sweep { source, .. } => exit_code(source),
        Error::Parse { .. }
        | Error::Integrity(_)
        | Error::Size(_)
        | Error::Domain(_)
        | Error::Unimputable { .. }
        | Error::DegenerateDesign(_)
        | Error::Selection(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match cli.command {
        Command::Synth(c) => (CommandName::Synth, c),
        Command::Impute(c) => (CommandName::Impute, c),
        Command::Fit(c) => (CommandName::Fit, c),
        Command::Predict(c) => (CommandName::Predict, c),
        Command::Evaluate(c) => (CommandName::Evaluate, c),
        Command::Bootstrap(c) => (CommandName::Bootstrap, c),
        Command::Loocv(c) => (CommandName::Loocv, c),
        Command::Pipeline(c) => (CommandName::Pipeline, c),
        Command::SweepM(c) => (CommandName::SweepM, c),
        Command::SweepQ(c) => (CommandName::SweepQ, c),
    };
    let result = common.resolve().and_then(|cfg| {
        if common.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config(format!("workers: {e}")))?;
        pool.install(|| commands::run(name, &cfg))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}
