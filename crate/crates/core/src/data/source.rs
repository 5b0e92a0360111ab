use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{load_csv, synth_generate, CsvOptions, Dataset, SynthSpec};
use crate::error::Result;

/// Where a dataset comes from: a CSV file or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        options: CsvOptions,
    },
    Synth(SynthSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv { path, options } => load_csv(path, options),
            DataSource::Synth(spec) => synth_generate(spec),
        }
    }

    /// Short name used in reports.
    pub fn label(&self) -> String {
        match self {
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned()),
            DataSource::Synth(spec) => spec.label(),
        }
    }
}
