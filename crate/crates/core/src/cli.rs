//! Command line entry points: `train`, `sweep`, `evaluate` and `synth`.
//!
//! Exit status: 0 on success, 1 for usage or configuration problems, 2 for
//! data problems (including a sweep in which every run failed), 3 when some
//! but not all sweep runs failed.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Encoding};
use crate::config::{sidecar_schema_path, RunConfig};
use crate::data::{bias_oracle, load_csv, synth_generate, synthetic_schema, write_csv, Schema, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::build_model;
use crate::sweep::{self, AocFrame, SweepSpec};
use crate::trainer::Trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fairdistract", version, about = "Fair classifiers with an embedded distraction module")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write checkpoint.json, trace.jsonl and metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// CSV to train on; replaces the data source named in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training and initialisation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the η × seed grid and write points, fronts and AOC summaries.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV of `method,dp,accuracy` rows reported next to our curve.
        #[arg(long)]
        baselines: Option<PathBuf>,
        #[arg(long, conflicts_with = "serial")]
        jobs: Option<usize>,
        /// Same as `--jobs 1`.
        #[arg(long)]
        serial: bool,
    },
    /// Print the metrics of a saved model on a CSV file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the sidecar schema next to the CSV.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Generate a synthetic biased dataset with its schema sidecar.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Monte-Carlo samples for the Bayes oracle summary.
        #[arg(long)]
        oracle: Option<usize>,
    },
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Shape { .. }
        | Error::Domain { .. }
        | Error::Metric(_)
        | Error::Diverged { .. } => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, data, out, seed } => cmd_train(&config, data, &out, seed).map(|_| EXIT_OK),
        Command::Sweep {
            config,
            data,
            out,
            baselines,
            jobs,
            serial,
        } => cmd_sweep(&config, data, &out, baselines.as_deref(), if serial { Some(1) } else { jobs }),
        Command::Evaluate { checkpoint, data, schema } => {
            let report = cmd_evaluate(&checkpoint, &data, schema.as_deref())?;
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{}", to_json(&report)) {
                // a closed pipe (`| head`) is not an error
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
                _ => Ok(EXIT_OK),
            }
        }
        Command::Synth { spec, out, oracle } => cmd_synth(&spec, &out, oracle).map(|_| EXIT_OK),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path, data: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(csv) = data {
        // a command line path is relative to the working directory
        let csv = if csv.is_absolute() {
            csv
        } else {
            std::env::current_dir().map_err(|e| Error::io(".", e))?.join(csv)
        };
        cfg.override_csv(csv);
    }
    Ok(cfg)
}

/// Contents of `metrics.json` written by `train`.
#[derive(Debug, Serialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub eta: f64,
    pub epochs: usize,
    pub provenance: String,
    pub train: MetricsReport,
    pub test: MetricsReport,
}

pub fn cmd_train(config: &Path, data: Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<TrainMetrics> {
    let mut cfg = load_config(config, data)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    let prepared = cfg.prepare()?;
    let model = build_model(&cfg.model.for_input(prepared.train.dim()))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.fit(&prepared.train, Some(&prepared.test))?;

    let report = TrainMetrics {
        seed: cfg.train.seed,
        eta: cfg.train.eta,
        epochs: trainer.epochs_done,
        provenance: prepared.train.provenance.clone(),
        train: sweep::evaluate_model(&trainer.model, &prepared.train)?,
        test: sweep::evaluate_model(&trainer.model, &prepared.test)?,
    };
    let encoding = Encoding {
        feature_names: prepared.train.feature_names.clone(),
        scaling: prepared.train.scaling.clone(),
        num_groups: prepared.train.num_groups,
    };
    create_dir(out)?;
    Checkpoint::capture(&trainer, encoding).save(out.join("checkpoint.json"))?;
    write(&out.join("trace.jsonl"), trainer.trace.to_jsonl())?;
    write(&out.join("metrics.json"), to_json(&report) + "\n")?;
    log::info!("test accuracy {:.4}, dp gap {:.4}", report.test.accuracy, report.test.dp_gap);
    Ok(report)
}

pub fn cmd_sweep(
    config: &Path,
    data: Option<PathBuf>,
    out: &Path,
    baselines: Option<&Path>,
    jobs: Option<usize>,
) -> Result<i32> {
    let cfg = load_config(config, data)?;
    let prepared = cfg.prepare()?;
    let jobs = jobs
        .or(cfg.sweep.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let spec = SweepSpec {
        etas: cfg.sweep.etas.clone(),
        seeds: cfg.sweep.seeds.clone(),
        train: cfg.train.clone(),
        model: cfg.model.for_input(prepared.train.dim()),
        jobs,
    };
    let curves = baselines.map(sweep::load_baselines).transpose()?.unwrap_or_default();
    let outcome = sweep::run_sweep(&spec, &prepared.train, &prepared.test)?;
    for f in &outcome.failures {
        eprintln!("run eta={} seed={} failed: {}", f.eta, f.seed, f.error);
    }
    if outcome.runs.is_empty() {
        return Err(Error::Data(format!("all {} sweep runs failed", outcome.failures.len())));
    }

    let frame = AocFrame {
        dp_max: None,
        acc_base: metrics::majority_accuracy(&prepared.test.labels()),
    };
    let summary = sweep::summarize(&outcome, &curves, frame)?;
    let points = outcome.points();
    create_dir(&out.join("curves"))?;
    create_dir(&out.join("traces"))?;
    write(&out.join("points.csv"), sweep::points_csv(&points))?;
    write(&out.join("front.csv"), sweep::front_csv(&points))?;
    write(&out.join("cells.csv"), sweep::cells_csv(&summary.cells))?;
    write(&out.join("summary.json"), to_json(&summary) + "\n")?;
    for m in &summary.methods {
        let name = format!("{}.csv", sanitize(&m.method));
        write(&out.join("curves").join(name), sweep::curve_csv(&m.front))?;
    }
    for r in &outcome.runs {
        write(&out.join("traces").join(&r.point.trace), r.trace.to_jsonl())?;
    }
    Ok(if outcome.failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn cmd_evaluate(checkpoint: &Path, data: &Path, schema: Option<&Path>) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let schema_path = schema.map(Path::to_path_buf).unwrap_or_else(|| sidecar_schema_path(data));
    let schema = Schema::load(&schema_path)?;
    let mut dataset = load_csv(data, &schema)?;
    if dataset.dim() != model.input_dim() {
        return Err(Error::Config(format!(
            "{} encodes {} features but the checkpoint expects {}",
            schema_path.display(),
            dataset.dim(),
            model.input_dim()
        )));
    }
    let enc = &ckpt.encoding;
    if !enc.feature_names.is_empty() && enc.feature_names != dataset.feature_names {
        return Err(Error::Config(format!(
            "{} encodes features differently from the training data",
            schema_path.display()
        )));
    }
    if let Some(s) = &enc.scaling {
        dataset = dataset.with_scaling(s);
    }
    sweep::evaluate_model(&model, &dataset)
}

pub fn cmd_synth(spec_path: &Path, out: &Path, oracle: Option<usize>) -> Result<()> {
    let spec = SynthSpec::load(spec_path)?;
    let data = synth_generate(&spec)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_csv(&data, out)?;
    write(&sidecar_schema_path(out), synthetic_schema(spec.d, 2).to_toml())?;
    if let Some(n_mc) = oracle {
        let report = bias_oracle(&spec, n_mc)?;
        write(&out.with_extension("oracle.json"), to_json(&report) + "\n")?;
    }
    Ok(())
}
