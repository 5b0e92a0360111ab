//! Command-line front end: synthetic data, training, evaluation, mix-count
//! sweeps and rolling correlation.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mcformer::analysis::{ablation_sweep, export_report, rolling_correlation, AblationGrid, SweepSettings};
use mcformer::data::{load_csv, synth_generate, CsvOptions, Dataset, SynthKind, SynthSpec};
use mcformer::training::{
    evaluate, load_checkpoint, prepare_windows, read_manifest, save_checkpoint, train_and_evaluate,
};
use mcformer::Error;
use serde::Serialize;

pub use config::{apply_override, split_assignment, AblationSection, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mcformer", version, about = "Mixed-channel transformer forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Fit a model and save its checkpoint and report.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the test segment.
    Eval(EvalArgs),
    /// Sweep the mix count m over seeds and horizons.
    Ablate(AblateArgs),
    /// Rolling Pearson correlation of two channels.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: SynthKind,
    #[arg(long = "m-channels")]
    m_channels: usize,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `model.m=3`. Also accepted as `--model.m=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long = "m-values", value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Two channels by name or 0-based index, e.g. `0,3`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    channels: Vec<String>,
    #[arg(long)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
    /// The file has no header row.
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    datetime_col: Option<usize>,
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown kind {s:?} (leader_follower|independent_walks|shared_season|drifting_corr)"))
}

/// Failure of one CLI invocation.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::Config(_) | Error::Split(_) | Error::InvalidWindow(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}

/// Moves `--a.b=v` and `--a.b v` arguments into `--set a.b=v`.
fn lift_dotted_flags(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut iter = args.into_iter().peekable();
    while let Some(arg) = iter.next() {
        let Some(s) = arg.to_str() else {
            out.push(arg);
            continue;
        };
        let Some(body) = s.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let key = body.split('=').next().unwrap_or_default();
        if !key.contains('.') {
            out.push(arg);
            continue;
        }
        let assignment = if body.contains('=') {
            body.to_string()
        } else if let Some(v) = iter.next_if(|n| n.to_str().is_some_and(|n| !n.starts_with("--"))) {
            format!("{key}={}", v.to_string_lossy())
        } else {
            body.to_string()
        };
        out.push("--set".into());
        out.push(assignment.into());
    }
    out
}

/// Runs one invocation; `args` includes the program name.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = lift_dotted_flags(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.render().to_string()));
        }
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Correlate(a) => cmd_correlate(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn load_run_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let overrides = args
        .set
        .iter()
        .map(|s| split_assignment(s).map(|(k, v)| (k.to_string(), v.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec = SynthSpec::new(a.kind, a.m_channels, a.length, a.seed);
    if let Some(lag) = a.lag {
        spec.lag = lag;
    }
    if let Some(noise) = a.noise {
        spec.noise = noise;
    }
    spec.validate()?;
    let ds = synth_generate(&spec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.write_csv(&a.out)?;
    write_json(&snapshot_path(&a.out), &spec)?;
    log::info!("wrote {} rows x {} channels to {}", ds.rows(), ds.channels(), a.out.display());
    Ok(())
}

/// `data.csv` → `data.spec.json`.
pub fn snapshot_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.spec.json"))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load_run_config(&a.cfg)?;
    let ds = cfg.data.load()?;
    cfg.validate_data(&ds, &[cfg.model.horizon])?;
    let sets = prepare_windows(&ds, &cfg.split, cfg.model.lookback, cfg.model.horizon)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("config.json"), &cfg)?;
    let (model, report) = train_and_evaluate(&cfg.model, &cfg.train, &sets)?;
    save_checkpoint(model.as_ref(), &cfg.output_dir.join("checkpoint"))?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    if let Some(test) = &report.test {
        println!("test mse {:.6} mae {:.6}", test.mse, test.mae);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    config_hash: String,
    test: mcformer::training::Metrics,
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = load_run_config(&a.cfg)?;
    let manifest = read_manifest(&a.checkpoint)?;
    if manifest.config != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint {} was saved with a different model configuration",
            a.checkpoint.display()
        ))
        .into());
    }
    let ds = cfg.data.load()?;
    cfg.validate_data(&ds, &[cfg.model.horizon])?;
    let sets = prepare_windows(&ds, &cfg.split, cfg.model.lookback, cfg.model.horizon)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let test = evaluate(model.as_ref(), &sets.test, cfg.train.batch_size)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("config.json"), &cfg)?;
    println!("test mse {:.6} mae {:.6}", test.mse, test.mae);
    let report = EvalReport {
        checkpoint: a.checkpoint,
        config_hash: mcformer::training::config_hash(&cfg.model, &cfg.train),
        test,
    };
    write_json(&cfg.output_dir.join("eval.json"), &report)?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(&a.cfg)?;
    if let Some(m) = a.m_values {
        cfg.ablation.m_values = m;
    }
    let horizons = if cfg.ablation.horizons.is_empty() {
        vec![cfg.model.horizon]
    } else {
        cfg.ablation.horizons.clone()
    };
    let ds = cfg.data.load()?;
    cfg.validate_data(&ds, &horizons)?;
    if let Some(&m) = cfg.ablation.m_values.iter().find(|&&m| m >= ds.channels()) {
        return Err(Error::Config(format!("m must be < M (m={m}, M={})", ds.channels())).into());
    }
    let grid = AblationGrid {
        m_values: cfg.ablation.m_values.clone(),
        datasets: vec![cfg.data.clone()],
        horizons,
        seeds: cfg.ablation.seeds.clone(),
    };
    if grid.cell_count() > cfg.ablation.max_runs {
        return Err(Error::Config(format!(
            "grid has {} cells, ablation.max_runs is {}",
            grid.cell_count(),
            cfg.ablation.max_runs
        ))
        .into());
    }
    let settings = SweepSettings {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        split: cfg.split,
        max_runs: cfg.ablation.max_runs,
        threads: None,
    };

    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("config.json"), &cfg)?;
    let live_path = cfg.output_dir.join("ablation_rows.csv");
    let file = File::create(&live_path).map_err(io_err(&live_path))?;
    let mut live = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    live.write_record(mcformer::analysis::REPORT_COLUMNS)
        .map_err(Error::from)?;
    live.flush().map_err(io_err(&live_path))?;
    let mut live_error = None;
    let outcome = ablation_sweep(&grid, &settings, |row| {
        let written = live
            .serialize(row)
            .map_err(Error::from)
            .and_then(|_| live.flush().map_err(io_err(&live_path)));
        if let Err(e) = written {
            live_error.get_or_insert(e);
        }
        log::info!("m={} h={} seed={} mse={:.6}", row.m, row.horizon, row.seed, row.mse);
    })?;
    if let Some(e) = live_error {
        return Err(e.into());
    }

    let ext = match cfg.ablation.format {
        mcformer::analysis::ReportFormat::Csv => "csv",
        mcformer::analysis::ReportFormat::Json => "json",
    };
    export_report(&outcome.rows, &cfg.output_dir.join(format!("ablation.{ext}")), cfg.ablation.format)?;
    write_json(&cfg.output_dir.join("failures.json"), &outcome.failures)?;
    for (key, med) in mcformer::analysis::median_mse(&outcome.rows) {
        println!("{} h={} m={} median mse {:.6}", key.0, key.1, key.2, med);
    }
    if !outcome.failures.is_empty() {
        log::warn!("{} of {} cells failed", outcome.failures.len(), grid.cell_count());
    }
    Ok(())
}

fn resolve_channel(ds: &Dataset, spec: &str) -> Result<usize, Error> {
    if let Some(i) = ds.channel_names().iter().position(|n| n == spec) {
        return Ok(i);
    }
    spec.parse::<usize>()
        .ok()
        .filter(|&i| i < ds.channels())
        .ok_or_else(|| Error::InvalidWindow(format!("no channel {spec:?} among {} channels", ds.channels())))
}

fn cmd_correlate(a: CorrelateArgs) -> Result<(), CliError> {
    if a.channels.len() != 2 {
        return Err(CliError::Usage(format!(
            "--channels needs exactly two entries, got {}",
            a.channels.len()
        )));
    }
    let opts = CsvOptions {
        has_header: !a.no_header,
        datetime_col: a.datetime_col,
        forward_fill: false,
    };
    let ds = load_csv(&a.data, &opts)?;
    let ca = resolve_channel(&ds, &a.channels[0])?;
    let cb = resolve_channel(&ds, &a.channels[1])?;
    let series = rolling_correlation(&ds, ca, cb, a.window)?;
    let file = File::create(&a.out).map_err(io_err(&a.out))?;
    let mut w = std::io::BufWriter::new(file);
    let emit = |w: &mut std::io::BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "start,end,pearson")?;
        for (t, r) in series.values.iter().enumerate() {
            writeln!(w, "{},{},{}", t, t + a.window, r)?;
        }
        w.flush()
    };
    emit(&mut w).map_err(io_err(&a.out))?;
    Ok(())
}
