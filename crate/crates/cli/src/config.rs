use std::path::{Path, PathBuf};

use longpred::evaluation::{EvaluationConfig, HarnessConfig, PredictionConfig};
use longpred::gee::GeeConfig;
use longpred::imputation::ImputationConfig;
use longpred::pipeline::{EnsembleConfig, ModelConfig, SelectionConfig};
use longpred::synthetic::GeneratorConfig;
use longpred::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Directory of imputed datasets; `<output>/imputed` when absent.
    pub imputed: Option<PathBuf>,
    /// Fitted ensemble; `<output>/model.json` when absent.
    pub model: Option<PathBuf>,
    /// Forecast table; `<output>/predictions.csv` when absent.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
    /// Feature counts for `sweep-q`; every count from 1 to the number of
    /// features when empty.
    pub q_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            m_values: vec![1, 5, 15, 25],
            q_values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub imputation: ImputationConfig,
    pub selection: SelectionConfig,
    pub gee: GeeConfig,
    pub ensemble: EnsembleConfig,
    pub prediction: PredictionConfig,
    pub evaluation: EvaluationConfig,
    pub synth: GeneratorConfig,
    pub sweep: SweepConfig,
    pub seed: u64,
}

impl PipelineConfig {
    /// Parses a JSON config, rejecting keys that name no field.
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let reference = serde_json::to_value(Self::default()).expect("default config serializes");
        check_known(&value, &reference, "")?;
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `path = value` overrides in order. Values are parsed as JSON and
    /// fall back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, Error> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut value, path, parsed)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn harness(&self) -> HarnessConfig {
        HarnessConfig {
            model: ModelConfig {
                imputation: self.imputation,
                selection: self.selection.clone(),
                gee: self.gee,
                ensemble: self.ensemble.clone(),
            },
            prediction: self.prediction.clone(),
            evaluation: self.evaluation.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.harness().validate()?;
        if let Some(&bad) = self.sweep.m_values.iter().find(|&&m| m == 0) {
            return Err(Error::Config(format!("sweep.m_values entries must be >= 1, got {bad}")));
        }
        let named = [
            ("paths.input", &self.paths.input),
            ("paths.schema", &self.paths.schema),
            ("paths.output", &self.paths.output),
            ("paths.imputed", &self.paths.imputed),
            ("paths.model", &self.paths.model),
            ("paths.predictions", &self.paths.predictions),
        ];
        let set: Vec<(&str, &PathBuf)> = named.iter().filter_map(|(k, p)| p.as_ref().map(|p| (*k, p))).collect();
        for (i, (ka, a)) in set.iter().enumerate() {
            for (kb, b) in &set[i + 1..] {
                if a == b {
                    return Err(Error::Config(format!("{ka} and {kb} both point to {}", a.display())));
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(&self, field: &str, p: &'a Option<PathBuf>) -> Result<&'a Path, Error> {
        p.as_deref().ok_or_else(|| Error::Config(format!("{field} is required for this command")))
    }

    pub fn output_dir(&self) -> Result<&Path, Error> {
        self.require("paths.output", &self.paths.output)
    }

    pub fn imputed_dir(&self) -> Result<PathBuf, Error> {
        self.derived(&self.paths.imputed, "imputed")
    }

    pub fn model_path(&self) -> Result<PathBuf, Error> {
        self.derived(&self.paths.model, "model.json")
    }

    pub fn predictions_path(&self) -> Result<PathBuf, Error> {
        self.derived(&self.paths.predictions, "predictions.csv")
    }

    fn derived(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf, Error> {
        match explicit {
            Some(p) => Ok(p.clone()),
            None => Ok(self.output_dir()?.join(name)),
        }
    }
}

fn check_known(value: &Value, reference: &Value, prefix: &str) -> Result<(), Error> {
    let (Value::Object(map), Value::Object(known)) = (value, reference) else {
        return Ok(());
    };
    for (k, v) in map {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            Some(r) => check_known(v, r, &path)?,
            None => return Err(Error::Config(format!("unknown config field `{path}`"))),
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, path: &str, new: Value) -> Result<(), Error> {
    let mut cur = root;
    for part in path.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config field `{path}`")))?,
            _ => return Err(Error::Config(format!("`{path}` does not name a config field"))),
        };
    }
    *cur = new;
    Ok(())
}
