use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multivariate series stored time-major: `values[t * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    rows: usize,
    channel_names: Vec<String>,
    /// Free-text sampling interval, e.g. `"1h"` or `"10m"`.
    pub freq: String,
    /// Where the data came from (file path or generator description).
    pub source: String,
}

impl Dataset {
    /// Builds a dataset from time-major values. Requires at least one row
    /// and one channel, finite values and unique channel names.
    pub fn new(
        values: Vec<f64>,
        channel_names: Vec<String>,
        freq: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let channels = channel_names.len();
        if channels == 0 {
            return Err(Error::shape("dataset needs at least one channel"));
        }
        if values.is_empty() || !values.len().is_multiple_of(channels) {
            return Err(Error::shape(format!(
                "{} values cannot form rows of {channels} channels",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                stage: format!("dataset row {}, channel {}", pos / channels, pos % channels),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = channel_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::config(format!("duplicate channel name {dup:?}")));
        }
        Ok(Dataset {
            rows: values.len() / channels,
            values,
            channel_names,
            freq: freq.into(),
            source: source.into(),
        })
    }

    /// Number of timesteps (T).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of channels (M).
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.channels();
        &self.values[t * m..(t + 1) * m]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|t| self.get(t, c)).collect()
    }

    /// Contiguous rows `[start, end)` as a new dataset.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.rows {
            return Err(Error::Split(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows
            )));
        }
        let m = self.channels();
        Ok(Dataset {
            values: self.values[start * m..end * m].to_vec(),
            rows: end - start,
            channel_names: self.channel_names.clone(),
            freq: self.freq.clone(),
            source: self.source.clone(),
        })
    }

    /// Writes a header row of channel names followed by one row per
    /// timestep. Floats use the shortest representation that round-trips.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&self.channel_names.join(","));
        out.push('\n');
        for t in 0..self.rows {
            let row: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// How [`load_csv`] interprets a file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Column holding ISO-8601 timestamps; dropped from the values.
    pub datetime_col: Option<usize>,
    /// Replace empty or NaN cells with the previous row's value instead of
    /// rejecting them.
    pub forward_fill: bool,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

fn freq_label(seconds: i64) -> String {
    match seconds {
        s if s > 0 && s % 86_400 == 0 => format!("{}d", s / 86_400),
        s if s > 0 && s % 3_600 == 0 => format!("{}h", s / 3_600),
        s if s > 0 && s % 60 == 0 => format!("{}m", s / 60),
        s => format!("{s}s"),
    }
}

/// Loads a comma-separated file into a [`Dataset`].
///
/// Error positions are 1-based: `row` is the line number in the file
/// (a header counts as line 1) and `col` the column number.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{other:?}")),
        })?;

    let mut width: Option<usize> = None;
    let mut names: Option<Vec<String>> = None;
    let mut values = Vec::new();
    let mut stamps: Vec<NaiveDateTime> = Vec::new();
    let mut prev_row: Option<Vec<f64>> = None;

    for (line, record) in reader.records().enumerate() {
        let line = line + 1;
        let record = record?;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::shape(format!(
                    "line {line} has {} fields, expected {w}",
                    record.len()
                )))
            }
            _ => {}
        }
        if let Some(dc) = opts.datetime_col {
            if dc >= record.len() {
                return Err(Error::config(format!(
                    "datetime column {dc} out of range for {} columns",
                    record.len()
                )));
            }
        }
        if line == 1 && opts.has_header {
            names = Some(
                record
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != opts.datetime_col)
                    .map(|(_, s)| s.trim().to_string())
                    .collect(),
            );
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(col) == opts.datetime_col {
                let ts = parse_timestamp(cell).ok_or_else(|| Error::Parse {
                    row: line,
                    col: col + 1,
                    msg: format!("unrecognised timestamp {cell:?}"),
                })?;
                if stamps.last().is_some_and(|last| ts < *last) {
                    return Err(Error::Order { row: line });
                }
                stamps.push(ts);
                continue;
            }
            let parsed = if cell.is_empty() {
                None
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_nan() => None,
                    Ok(v) if v.is_finite() => Some(v),
                    _ => {
                        return Err(Error::Parse {
                            row: line,
                            col: col + 1,
                            msg: format!("not a finite number: {cell:?}"),
                        })
                    }
                }
            };
            let v = match parsed {
                Some(v) => v,
                None if opts.forward_fill => {
                    let idx = row.len();
                    prev_row.as_ref().map(|p| p[idx]).ok_or_else(|| Error::Parse {
                        row: line,
                        col: col + 1,
                        msg: "missing value with nothing to forward-fill from".into(),
                    })?
                }
                None => {
                    return Err(Error::Parse {
                        row: line,
                        col: col + 1,
                        msg: "missing value".into(),
                    })
                }
            };
            row.push(v);
        }
        values.extend_from_slice(&row);
        prev_row = Some(row);
    }

    let width = width.ok_or(Error::InsufficientData {
        needed: 2,
        available: 0,
    })?;
    let channels = width - usize::from(opts.datetime_col.is_some());
    if channels == 0 {
        return Err(Error::shape("file has no value columns"));
    }
    let rows = values.len() / channels;
    if rows < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: rows,
        });
    }
    let names = names.unwrap_or_else(|| (0..channels).map(|c| format!("c{c}")).collect());
    let freq = match stamps.as_slice() {
        [a, b, ..] => freq_label((*b - *a).num_seconds()),
        _ => "unknown".to_string(),
    };
    Dataset::new(values, names, freq, path.display().to_string())
}

/// Train/validation/test fractions for a chronological split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = SplitSpec { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Split(format!("{name} fraction {f} not in (0, 1)")));
            }
        }
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Row boundaries `(end of train, end of val)` for `rows` timesteps.
    pub fn boundaries(&self, rows: usize) -> (usize, usize) {
        // the small offset keeps e.g. 10·(0.7+0.1) from flooring to 7
        let at = |frac: f64| ((rows as f64 * frac) + 1e-9).floor() as usize;
        (at(self.train).min(rows), at(self.train + self.val).min(rows))
    }
}

/// Splits rows into contiguous train, validation and test segments, in
/// that order, with boundaries at `floor(T·frac)`.
pub fn chronological_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let (b1, b2) = spec.boundaries(ds.rows());
    let t = ds.rows();
    for (name, len) in [("train", b1), ("val", b2 - b1), ("test", t - b2)] {
        if len == 0 {
            return Err(Error::Split(format!("{name} segment is empty for T={t}")));
        }
    }
    Ok((ds.slice_rows(0, b1)?, ds.slice_rows(b1, b2)?, ds.slice_rows(b2, t)?))
}

/// Per-channel affine scaling fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant channels.
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &Dataset) -> Scaler {
        let (t, m) = (train.rows() as f64, train.channels());
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for c in 0..m {
            let col = train.column(c);
            let mu = col.iter().sum::<f64>() / t;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / t;
            mean[c] = mu;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        let m = ds.channels();
        if m != self.mean.len() {
            return Err(Error::shape(format!(
                "scaler fitted on {} channels applied to {m}",
                self.mean.len()
            )));
        }
        let values = ds
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % m]) / self.std[i % m])
            .collect();
        Dataset::new(values, ds.channel_names().to_vec(), ds.freq.clone(), ds.source.clone())
    }

    /// Maps a scaled value of channel `c` back to original units.
    pub fn inverse(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }
}

/// Fits a [`Scaler`] on `train` and applies it to `train` and every
/// dataset in `others`. Metrics downstream are reported in this scaled
/// space.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Scaler)> {
    let scaler = Scaler::fit(train);
    let scaled_train = scaler.transform(train)?;
    let scaled = others
        .iter()
        .map(|d| scaler.transform(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((scaled_train, scaled, scaler))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: usize) -> Dataset {
        let values = (0..rows * 2).map(|v| v as f64).collect();
        Dataset::new(values, vec!["a".into(), "b".into()], "1h", "test").unwrap()
    }

    #[test]
    fn split_floor_arithmetic() {
        let (a, b, c) = chronological_split(&ds(10), &SplitSpec::new(0.7, 0.1, 0.2).unwrap()).unwrap();
        assert_eq!((a.rows(), b.rows(), c.rows()), (7, 1, 2));
        assert_eq!(b.get(0, 0), 14.0);
    }

    #[test]
    fn split_empty_segment() {
        let spec = SplitSpec::new(0.98, 0.01, 0.01).unwrap();
        assert!(matches!(chronological_split(&ds(10), &spec), Err(Error::Split(_))));
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.5, 0.5, 0.0).is_err());
        assert!(SplitSpec::new(0.5, 0.3, 0.3).is_err());
        assert!(SplitSpec::new(0.6, 0.2, 0.2).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = Dataset::new(vec![1.0, 2.0], vec!["a".into(), "a".into()], "", "");
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn standardize_hand_example() {
        let train = Dataset::new(vec![1.0, 4.0, 3.0, 4.0], vec!["x".into(), "k".into()], "", "").unwrap();
        let (scaled, _, scaler) = standardize(&train, &[]).unwrap();
        assert_eq!(scaler.mean, vec![2.0, 4.0]);
        assert_eq!(scaler.std, vec![1.0, 1.0]);
        assert_eq!(scaled.column(0), vec![-1.0, 1.0]);
        assert_eq!(scaled.column(1), vec![0.0, 0.0]);
        assert_eq!(scaler.inverse(0, -1.0), 1.0);
    }

    #[test]
    fn freq_labels() {
        assert_eq!(freq_label(600), "10m");
        assert_eq!(freq_label(3600), "1h");
        assert_eq!(freq_label(86_400), "1d");
        assert_eq!(freq_label(7), "7s");
    }
}
