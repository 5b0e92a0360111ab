use std::path::{Path, PathBuf};

use mcformer::analysis::ReportFormat;
use mcformer::data::{DataSource, Dataset, SplitSpec};
use mcformer::model::ModelConfig;
use mcformer::training::TrainConfig;
use mcformer::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Sweep-only settings of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub m_values: Vec<usize>,
    /// Empty means the model horizon only.
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub max_runs: usize,
    pub format: ReportFormat,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            m_values: vec![0, 1, 2, 3],
            horizons: Vec::new(),
            seeds: vec![0, 1, 2],
            max_runs: 500,
            format: ReportFormat::Csv,
        }
    }
}

/// Everything one experiment needs, as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: SplitSpec,
    pub output_dir: PathBuf,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            split: SplitSpec::default(),
            output_dir: PathBuf::from("runs/default"),
            ablation: AblationSection::default(),
        }
    }
}

/// Sets `path` (dot separated) inside `root` to `value`, creating
/// intermediate objects. `value` is read as JSON when it parses, otherwise
/// as a plain string.
pub fn apply_override(root: &mut Value, path: &str, value: &str) -> Result<(), Error> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(Error::Config(format!(
                    "{}: cannot set a field inside a non-object value",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), parsed);
            return Ok(());
        }
        node = obj.entry((*key).to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

/// Parses `key=value`.
pub fn split_assignment(s: &str) -> Result<(&str, &str), Error> {
    s.split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))
}

impl RunConfig {
    /// Reads `path` (or starts from `{}`), applies overrides in order and
    /// deserialises, reporting the key path of any rejected field.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Error> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: invalid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate_static()?;
        Ok(cfg)
    }

    /// Checks that do not need the data.
    pub fn validate_static(&self) -> Result<(), Error> {
        let ctx = |section: &str, e: Error| match e {
            Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
            other => other,
        };
        self.model.validate().map_err(|e| ctx("model", e))?;
        self.train.validate().map_err(|e| ctx("train", e))?;
        self.split.validate().map_err(|e| ctx("split", e))?;
        if let DataSource::Synth(spec) = &self.data {
            spec.validate().map_err(|e| ctx("data.synth", e))?;
            if spec.channels != self.model.channels {
                return Err(Error::Config(format!(
                    "model.M ({}) differs from data.synth.channels ({})",
                    self.model.channels, spec.channels
                )));
            }
        }
        Ok(())
    }

    /// Checks against the loaded dataset: channel count and segment
    /// lengths of at least `L + h`.
    pub fn validate_data(&self, ds: &Dataset, horizons: &[usize]) -> Result<(), Error> {
        if ds.channels() != self.model.channels {
            return Err(Error::Config(format!(
                "model.M ({}) differs from the dataset's {} channels",
                self.model.channels,
                ds.channels()
            )));
        }
        let (a, b) = self.split.boundaries(ds.rows());
        let segments = [("train", a), ("val", b - a), ("test", ds.rows() - b)];
        for &h in horizons {
            let needed = self.model.lookback + h;
            for (name, rows) in segments {
                if rows < needed {
                    return Err(Error::Config(format!(
                        "{name} segment has {rows} rows, L+h needs {needed} (L={}, h={h})",
                        self.model.lookback
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_objects() {
        let mut v = serde_json::json!({"model": {"m": 2}});
        apply_override(&mut v, "model.m", "3").unwrap();
        apply_override(&mut v, "train.seed", "9").unwrap();
        apply_override(&mut v, "output_dir", "out/x").unwrap();
        assert_eq!(v["model"]["m"], 3);
        assert_eq!(v["train"]["seed"], 9);
        assert_eq!(v["output_dir"], "out/x");
        assert!(apply_override(&mut v, "model.m.x", "1").is_err());
        assert!(apply_override(&mut v, "model..m", "1").is_err());
    }
}
