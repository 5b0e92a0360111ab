use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DataSource, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{prepare_windows, train_and_evaluate, ForecastReport, TrainConfig, WindowSets};

/// Environment variable capping the sweep's worker threads.
pub const THREADS_ENV: &str = "MCF_THREADS";

/// Cartesian grid of sweep cells, visited datasets → m → horizon → seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub m_values: Vec<usize>,
    pub datasets: Vec<DataSource>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn cell_count(&self) -> usize {
        self.m_values.len() * self.datasets.len() * self.horizons.len() * self.seeds.len()
    }

    /// `(dataset index, m, horizon, seed)` in emission order.
    pub fn cells(&self) -> Vec<(usize, usize, usize, u64)> {
        let mut out = Vec::with_capacity(self.cell_count());
        for d in 0..self.datasets.len() {
            for &m in &self.m_values {
                for &h in &self.horizons {
                    for &s in &self.seeds {
                        out.push((d, m, h, s));
                    }
                }
            }
        }
        out
    }
}

/// Shared settings of every cell. `model.channels`, `model.mix`,
/// `model.horizon` and `train.seed` are overwritten per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub max_runs: usize,
    /// Worker count before the environment cap; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            max_runs: 1000,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub m: usize,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub m: usize,
    pub horizon: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<ForecastReport>,
    pub failures: Vec<CellFailure>,
}

/// Number of sweep workers: `requested` (or the core count), capped by
/// `MCF_THREADS` when set, and never more than `cells`.
pub fn worker_threads(requested: Option<usize>, cells: usize) -> usize {
    let base = requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(usize::MAX);
    base.min(cap).min(cells).max(1)
}

type CellResult = std::result::Result<(AblationRow, ForecastReport), CellFailure>;

/// Fits and evaluates one model per grid cell.
///
/// Cells run on a worker pool; `on_row` sees every successful row in grid
/// order as soon as all earlier cells have finished. Failed cells are
/// recorded and the sweep continues.
pub fn ablation_sweep(
    grid: &AblationGrid,
    settings: &SweepSettings,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationOutcome> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("ablation grid has an empty axis".into()));
    }
    if cells.len() > settings.max_runs {
        return Err(Error::Config(format!(
            "grid has {} cells, run cap is {}",
            cells.len(),
            settings.max_runs
        )));
    }
    let datasets = grid
        .datasets
        .iter()
        .map(|src| Ok((src.label(), src.load()?)))
        .collect::<Result<Vec<_>>>()?;
    for (label, ds) in &datasets {
        if let Some(&m) = grid.m_values.iter().find(|&&m| m >= ds.channels()) {
            return Err(Error::Config(format!(
                "m must be < M (m={m}, M={}) for dataset {label}",
                ds.channels()
            )));
        }
    }

    let mut prepared: HashMap<(usize, usize), WindowSets> = HashMap::new();
    let mut prep_errors: HashMap<(usize, usize), String> = HashMap::new();
    for (d, (_, ds)) in datasets.iter().enumerate() {
        for &h in &grid.horizons {
            match prepare_windows(ds, &settings.split, settings.model.lookback, h) {
                Ok(sets) => {
                    prepared.insert((d, h), sets);
                }
                Err(e) => {
                    prep_errors.insert((d, h), e.to_string());
                }
            }
        }
    }

    let run_cell = |k: usize| -> CellResult {
        let (d, m, h, seed) = cells[k];
        let (label, ds) = &datasets[d];
        let fail = |error: String| CellFailure {
            dataset: label.clone(),
            m,
            horizon: h,
            seed,
            error,
        };
        let sets = prepared
            .get(&(d, h))
            .ok_or_else(|| fail(prep_errors.get(&(d, h)).cloned().unwrap_or_default()))?;
        let model = ModelConfig {
            channels: ds.channels(),
            mix: m,
            horizon: h,
            ..settings.model.clone()
        };
        let train = TrainConfig {
            seed,
            ..settings.train.clone()
        };
        let started = Instant::now();
        let (_, report) = train_and_evaluate(&model, &train, sets).map_err(|e| fail(e.to_string()))?;
        let test = report.test.clone().expect("train_and_evaluate fills test metrics");
        Ok((
            AblationRow {
                dataset: label.clone(),
                m,
                horizon: h,
                seed,
                mse: test.mse,
                mae: test.mae,
                wall_time_s: started.elapsed().as_secs_f64(),
            },
            report,
        ))
    };

    let mut outcome = AblationOutcome::default();
    let mut emit = |result: CellResult, outcome: &mut AblationOutcome| match result {
        Ok((row, report)) => {
            on_row(&row);
            outcome.rows.push(row);
            outcome.reports.push(report);
        }
        Err(failure) => {
            log::warn!(
                "sweep cell {} m={} h={} seed={} failed: {}",
                failure.dataset,
                failure.m,
                failure.horizon,
                failure.seed,
                failure.error
            );
            outcome.failures.push(failure);
        }
    };

    let threads = worker_threads(settings.threads, cells.len());
    if threads == 1 {
        for k in 0..cells.len() {
            emit(run_cell(k), &mut outcome);
        }
        return Ok(outcome);
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, CellResult)>();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let tx = tx.clone();
            let (next, run_cell, total) = (&next, &run_cell, cells.len());
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= total {
                    break;
                }
                if tx.send((k, run_cell(k))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut expected = 0;
        for (k, result) in rx {
            pending.insert(k, result);
            while let Some(result) = pending.remove(&expected) {
                emit(result, &mut outcome);
                expected += 1;
            }
        }
    });
    Ok(outcome)
}

/// Median test MSE per `(dataset, horizon, m)` over seeds.
pub fn median_mse(rows: &[AblationRow]) -> BTreeMap<(String, usize, usize), f64> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.dataset.clone(), r.horizon, r.m)).or_default().push(r.mse);
    }
    groups
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            (k, med)
        })
        .collect()
}
