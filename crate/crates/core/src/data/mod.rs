//! Loading, splitting, scaling, windowing and synthesising datasets.

mod dataset;
mod source;
mod synth;
mod window;

pub use dataset::{chronological_split, load_csv, standardize, CsvOptions, Dataset, Scaler, SplitSpec};
pub use source::DataSource;
pub use synth::{synth_generate, SynthKind, SynthSpec};
pub use window::{make_windows, window_count, WindowSample};
