use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::AblationRow;
use crate::error::{Error, Result};

pub const REPORT_COLUMNS: [&str; 7] = ["dataset", "m", "horizon", "seed", "mse", "mae", "wall_time_s"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?} (csv|json)"))),
        }
    }
}

/// Writes the rows in the given order.
pub fn export_report(rows: &[AblationRow], path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(REPORT_COLUMNS)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        ReportFormat::Json => {
            let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
            let text = serde_json::to_string_pretty(rows)?;
            file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
        }
    }
}

/// Reads a report written by [`export_report`].
pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<AblationRow>> {
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            if header != REPORT_COLUMNS {
                return Err(Error::Format(format!("unexpected report columns {header:?}")));
            }
            r.deserialize().map(|row| row.map_err(Error::from)).collect()
        }
        ReportFormat::Json => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}
