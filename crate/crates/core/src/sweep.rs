//! η × seed grids, Pareto fronts and area-over-curve summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{build_model, ModelConfig, PartitionedModel};
use crate::trainer::{train, TrainConfig, TrainTrace};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub etas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Architecture; `init_seed` is replaced by each run's seed.
    pub model: ModelConfig,
    /// Worker threads. 1 runs everything on the calling thread.
    pub jobs: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() {
            return Err(Error::Config("η grid is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.train.validate()?;
        self.model.validate()
    }

    /// The configuration of the run at `(eta, seed)`.
    pub fn run_configs(&self, eta: f64, seed: u64) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            init_seed: seed,
            ..self.model.clone()
        };
        let train = TrainConfig {
            eta,
            seed,
            ..self.train.clone()
        };
        (model, train)
    }

    fn grid(&self) -> Vec<(f64, u64)> {
        let mut etas = self.etas.clone();
        etas.sort_by(f64::total_cmp);
        etas.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        etas.iter()
            .flat_map(|&e| seeds.iter().map(move |&s| (e, s)))
            .collect()
    }
}

/// Test-set metrics of one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub eta: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub average_precision: Option<f64>,
    pub dp_gap: f64,
    pub eo_gap: Option<f64>,
    /// File name of the run's epoch trace inside the sweep output.
    pub trace: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub eta: f64,
    pub seed: u64,
    pub error: String,
}

/// Seed aggregate for one η.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub eta: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub mean_dp_gap: f64,
    pub max_dp_gap: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub point: ParetoPoint,
    pub trace: TrainTrace,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// Sorted by `(η, seed)`.
    pub runs: Vec<RunOutput>,
    pub failures: Vec<RunFailure>,
}

impl SweepOutcome {
    pub fn points(&self) -> Vec<ParetoPoint> {
        self.runs.iter().map(|r| r.point.clone()).collect()
    }

    pub fn cells(&self) -> Vec<Cell> {
        cells(&self.points())
    }
}

pub fn trace_name(eta: f64, seed: u64) -> String {
    format!("eta{eta}_seed{seed}.jsonl")
}

/// Trains one model and reports its test metrics.
pub fn run_one(
    spec: &SweepSpec,
    eta: f64,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(PartitionedModel, RunOutput)> {
    let start = Instant::now();
    let (mc, tc) = spec.run_configs(eta, seed);
    let (model, trace) = train(build_model(&mc)?, train_set, &tc)?;
    let report = evaluate_model(&model, test_set)?;
    let point = ParetoPoint {
        eta,
        seed,
        accuracy: report.accuracy,
        average_precision: report.average_precision,
        dp_gap: report.dp_gap,
        eo_gap: report.eo_gap,
        trace: trace_name(eta, seed),
    };
    Ok((
        model,
        RunOutput {
            point,
            trace,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    ))
}

pub fn evaluate_model(model: &PartitionedModel, data: &Dataset) -> Result<MetricsReport> {
    let scores = model.predict(&data.x)?;
    metrics::evaluate(&scores, &data.labels(), &data.a, data.num_groups, DEFAULT_THRESHOLD)
}

/// Trains every `(η, seed)` pair. A failing run is recorded and the rest
/// continue; the result does not depend on `jobs`.
pub fn run_sweep(spec: &SweepSpec, train_set: &Dataset, test_set: &Dataset) -> Result<SweepOutcome> {
    spec.validate()?;
    let grid = spec.grid();
    let task = |&(eta, seed): &(f64, u64)| {
        let out = run_one(spec, eta, seed, train_set, test_set).map(|(_, r)| r);
        if let Err(e) = &out {
            log::warn!("run eta={eta} seed={seed} failed: {e}");
        }
        ((eta, seed), out)
    };
    let results: Vec<_> = if spec.jobs == 1 {
        grid.iter().map(task).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", spec.jobs)))?;
        pool.install(|| grid.par_iter().map(task).collect())
    };

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((eta, seed), out) in results {
        match out {
            Ok(r) => runs.push(r),
            Err(e) => failures.push(RunFailure {
                eta,
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(SweepOutcome { runs, failures })
}

/// Per-η mean/max over seeds, in ascending η.
pub fn cells(points: &[ParetoPoint]) -> Vec<Cell> {
    let mut by_eta: BTreeMap<u64, (f64, Vec<&ParetoPoint>)> = BTreeMap::new();
    for p in points {
        // η ≥ 0, so the bit pattern orders like the value
        by_eta.entry(p.eta.to_bits()).or_insert((p.eta, Vec::new())).1.push(p);
    }
    by_eta
        .into_values()
        .map(|(eta, ps)| {
            let acc: Vec<f64> = ps.iter().map(|p| p.accuracy).collect();
            let dp: Vec<f64> = ps.iter().map(|p| p.dp_gap).collect();
            let (mean_accuracy, _) = metrics::mean_and_max(&acc);
            let (mean_dp_gap, max_dp_gap) = metrics::mean_and_max(&dp);
            Cell {
                eta,
                runs: ps.len(),
                mean_accuracy,
                mean_dp_gap,
                max_dp_gap,
            }
        })
        .collect()
}

/// True if `p` is at least as fair and as accurate as `q`, and strictly
/// better in one of the two.
pub fn dominates(p: (f64, f64), q: (f64, f64)) -> bool {
    p.0 <= q.0 && p.1 >= q.1 && (p.0 < q.0 || p.1 > q.1)
}

/// Indices of the non-dominated `(Δ_DP, accuracy)` points, ordered by
/// ascending Δ_DP.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .0
            .total_cmp(&points[j].0)
            .then(points[j].1.total_cmp(&points[i].1))
    });
    let mut front = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut last: Option<(f64, f64)> = None;
    for i in order {
        let p = points[i];
        // equal points do not dominate each other
        if p.1 > best_acc || last == Some(p) {
            front.push(i);
            best_acc = best_acc.max(p.1);
            last = Some(p);
        }
    }
    front
}

/// A labelled curve from outside this run, e.g. transcribed published numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCurve {
    pub method: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
struct BaselineRow {
    method: String,
    dp: f64,
    accuracy: f64,
}

/// Reads `method,dp,accuracy` rows, grouping by method in first-seen order.
pub fn load_baselines(path: impl AsRef<Path>) -> Result<Vec<BaselineCurve>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut curves: Vec<BaselineCurve> = Vec::new();
    for (i, row) in reader.deserialize::<BaselineRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        for (name, v) in [("dp", row.dp), ("accuracy", row.accuracy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(path, format!("row {}: {name} = {v} is outside [0,1]", i + 1)));
            }
        }
        match curves.iter_mut().find(|c| c.method == row.method) {
            Some(c) => c.points.push((row.dp, row.accuracy)),
            None => curves.push(BaselineCurve {
                method: row.method,
                points: vec![(row.dp, row.accuracy)],
            }),
        }
    }
    Ok(curves)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Measured,
    Transcribed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub source: Source,
    pub aoc: f64,
    /// Non-dominated `(Δ_DP, accuracy)` points in ascending Δ_DP.
    pub front: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub dp_max: f64,
    pub acc_base: f64,
    pub cells: Vec<Cell>,
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<RunFailure>,
}

/// Reference frame shared by every compared curve.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct AocFrame {
    /// Right end of the Δ_DP axis; the largest Δ_DP among all curves if unset.
    pub dp_max: Option<f64>,
    /// Accuracy counted as zero gain; required.
    pub acc_base: f64,
}

/// AOC and fronts for the sweep (one point per η: mean accuracy, max Δ_DP),
/// for its η = 0 cell alone under the name `erm`, and for each baseline.
pub fn summarize(
    outcome: &SweepOutcome,
    baselines: &[BaselineCurve],
    frame: AocFrame,
) -> Result<SummaryReport> {
    let cells = outcome.cells();
    let mut curves: Vec<(String, Source, Vec<(f64, f64)>)> = Vec::new();
    if !cells.is_empty() {
        let ours: Vec<(f64, f64)> = cells.iter().map(|c| (c.max_dp_gap, c.mean_accuracy)).collect();
        curves.push(("distraction".into(), Source::Measured, ours));
        if let Some(c) = cells.iter().find(|c| c.eta == 0.0) {
            curves.push(("erm".into(), Source::Measured, vec![(c.max_dp_gap, c.mean_accuracy)]));
        }
    }
    for b in baselines {
        if curves.iter().any(|c| c.0 == b.method) {
            return Err(Error::Config(format!("baseline method name {:?} is reserved", b.method)));
        }
        if b.points.is_empty() {
            continue;
        }
        curves.push((b.method.clone(), Source::Transcribed, b.points.clone()));
    }
    if !(0.0..=1.0).contains(&frame.acc_base) {
        return Err(Error::Config(format!("acc_base {} is outside [0,1]", frame.acc_base)));
    }
    let observed_max = curves
        .iter()
        .flat_map(|c| c.2.iter().map(|p| p.0))
        .fold(0.0f64, f64::max);
    let dp_max = match frame.dp_max {
        Some(v) if !(v > 0.0) || !v.is_finite() => {
            return Err(Error::Config(format!("dp_max must be positive, got {v}")))
        }
        Some(v) => v,
        // a curve set with zero DP everywhere still needs a non-empty axis
        None if observed_max > 0.0 => observed_max,
        None => 1.0,
    };

    let methods = curves
        .into_iter()
        .map(|(method, source, pts)| {
            let front = pareto_front(&pts).into_iter().map(|i| pts[i]).collect();
            Ok(MethodSummary {
                aoc: metrics::area_over_curve(&pts, dp_max, frame.acc_base)?,
                method,
                source,
                front,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SummaryReport {
        dp_max,
        acc_base: frame.acc_base,
        cells,
        methods,
        failures: outcome.failures.clone(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn points_csv(points: &[ParetoPoint]) -> String {
    let mut out = String::from("eta,seed,accuracy,average_precision,dp_gap,eo_gap,trace\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.eta,
            p.seed,
            p.accuracy,
            opt(p.average_precision),
            p.dp_gap,
            opt(p.eo_gap),
            p.trace
        );
    }
    out
}

/// Front of the per-run points.
pub fn front_csv(points: &[ParetoPoint]) -> String {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.dp_gap, p.accuracy)).collect();
    let front: Vec<ParetoPoint> = pareto_front(&xy).into_iter().map(|i| points[i].clone()).collect();
    points_csv(&front)
}

pub fn cells_csv(cells: &[Cell]) -> String {
    let mut out = String::from("eta,runs,mean_accuracy,mean_dp_gap,max_dp_gap\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            c.eta, c.runs, c.mean_accuracy, c.mean_dp_gap, c.max_dp_gap
        );
    }
    out
}

pub fn curve_csv(front: &[(f64, f64)]) -> String {
    let mut out = String::from("dp_gap,accuracy\n");
    for (dp, acc) in front {
        let _ = writeln!(out, "{dp},{acc}");
    }
    out
}
