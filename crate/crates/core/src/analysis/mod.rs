//! Mix-count sweeps, report export and rolling inter-channel correlation.

mod ablation;
mod correlation;
mod export;

pub use ablation::{
    ablation_sweep, median_mse, worker_threads, AblationGrid, AblationOutcome, AblationRow, CellFailure,
    SweepSettings, THREADS_ENV,
};
pub use correlation::{rolling_correlation, rolling_pearson, CorrelationSeries};
pub use export::{export_report, read_report, ReportFormat, REPORT_COLUMNS};
