//! Configuration-driven experiments: one training run per
//! (antennas, server power, seed) cell, CSV artifacts per cell and a sweep
//! summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::airsim::audit_uniform_forcing;
use crate::chanmodel::{draw_realization, ChannelParams, Geometry};
use crate::config::{validate_config, AggregationKind, ExperimentConfig, TaskKind};
use crate::dataio::{load_idx, shard_non_iid, LabeledDataset};
use crate::dcsolver::{solve, LiftedProblem, SolverOptions};
use crate::error::{Error, Result};
use crate::fltrain::{
    softmax_gradient, softmax_loss, theorem1_bound, train, write_round_log, Aggregation, AirCompLink, RidgeTask,
    SoftmaxTask, Task, TrainConfig, TrainLog,
};
use crate::gradcodec::normalize;
use crate::linalg::CVector;
use crate::rng::{gaussian, stream_rng, streams, SimRng};
use crate::txrx::{design, node_mse, node_mse_closed_form, server_power};

const PLOT_SCRIPT: &str = include_str!("../../../scripts/plot_results.py");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One cell per seed at `experiment.antennas` and `power.server_dbw`.
    Single,
    /// Cartesian product of the sweep axes and the seeds.
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub antennas: usize,
    pub server_dbw: f64,
    pub seed: u64,
}

impl CellSpec {
    pub fn name(&self) -> String {
        format!("n{}_ps{}_seed{}", self.antennas, self.server_dbw, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: CellSpec,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    pub mean_mse_analytic: f64,
    pub mean_mse_empirical: f64,
    /// Coefficient of variation of the per-round analytic mean MSE.
    pub mse_cv: f64,
    pub max_mse_analytic: f64,
    pub mean_sca_iters_u: f64,
    pub mean_sca_iters_v: f64,
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "antennas",
    "server_dbw",
    "seed",
    "final_train_loss",
    "final_test_accuracy",
    "mean_mse_analytic",
    "mean_mse_empirical",
    "mse_cv",
    "max_mse_analytic",
    "mean_sca_iters_u",
    "mean_sca_iters_v",
];

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

impl CellSummary {
    pub fn from_log(cell: CellSpec, log: &TrainLog) -> Self {
        let rounds = &log.rounds;
        let last = rounds.last().expect("at least one round");
        let mse: Vec<f64> = rounds.iter().map(|r| r.mse_avg_analytic).collect();
        let mse_mean = mean(mse.iter().copied());
        let sd = mean(mse.iter().map(|m| (m - mse_mean).powi(2))).sqrt();
        Self {
            cell,
            final_train_loss: last.train_loss_avg,
            final_test_accuracy: last.test_accuracy_avg,
            mean_mse_analytic: mse_mean,
            mean_mse_empirical: mean(rounds.iter().map(|r| r.mse_avg_empirical)),
            mse_cv: sd / mse_mean,
            max_mse_analytic: rounds.iter().map(|r| r.mse_max).fold(0.0, f64::max),
            mean_sca_iters_u: mean(rounds.iter().map(|r| r.sca_iters_u as f64)),
            mean_sca_iters_v: mean(rounds.iter().map(|r| r.sca_iters_v as f64)),
        }
    }

    fn record(&self) -> [String; 11] {
        [
            self.cell.antennas.to_string(),
            self.cell.server_dbw.to_string(),
            self.cell.seed.to_string(),
            format!("{:e}", self.final_train_loss),
            format!("{:e}", self.final_test_accuracy),
            format!("{:e}", self.mean_mse_analytic),
            format!("{:e}", self.mean_mse_empirical),
            format!("{:e}", self.mse_cv),
            format!("{:e}", self.max_mse_analytic),
            format!("{:e}", self.mean_sca_iters_u),
            format!("{:e}", self.mean_sca_iters_v),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub cells: Vec<CellSummary>,
}

pub fn plan_cells(config: &ExperimentConfig, mode: Mode) -> Vec<CellSpec> {
    let (antennas, powers) = match mode {
        Mode::Single => (vec![config.experiment.antennas], vec![config.power.server_dbw]),
        Mode::Sweep => (config.sweep.antennas.clone(), config.sweep.server_dbw.clone()),
    };
    let mut cells = Vec::new();
    for &n in &antennas {
        for &p in &powers {
            for &seed in &config.experiment.seeds {
                cells.push(CellSpec {
                    antennas: n,
                    server_dbw: p,
                    seed,
                });
            }
        }
    }
    cells
}

type SharedTask = Arc<dyn Task + Send + Sync>;

fn required<'a>(path: Option<&'a PathBuf>, key: &str) -> Result<&'a PathBuf> {
    path.ok_or_else(|| Error::Config(vec![format!("{key} is required for the mnist task")]))
}

pub fn load_mnist(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &config.data;
    let train = load_idx(
        required(d.train_images.as_ref(), "data.train_images")?,
        required(d.train_labels.as_ref(), "data.train_labels")?,
    )?;
    let test = load_idx(
        required(d.test_images.as_ref(), "data.test_images")?,
        required(d.test_labels.as_ref(), "data.test_labels")?,
    )?;
    Ok((train, test))
}

/// Builds the training task for every seed; seeds share a task when the
/// data does not depend on them.
fn prepare_tasks(config: &ExperimentConfig) -> Result<BTreeMap<u64, SharedTask>> {
    let k = config.experiment.nodes;
    let mut tasks = BTreeMap::new();
    match config.experiment.task {
        TaskKind::Mnist => {
            let (train_set, test_set) = load_mnist(config)?;
            let mut shared: Option<SharedTask> = None;
            for &seed in &config.experiment.seeds {
                let task = if config.data.shuffle_within_label {
                    let mut rng = stream_rng(seed, streams::DATA);
                    let shards = shard_non_iid(&train_set, k, config.data.shard_size, Some(&mut rng))?;
                    Arc::new(SoftmaxTask::new(shards, Some(test_set.clone()))?) as SharedTask
                } else {
                    match &shared {
                        Some(t) => t.clone(),
                        None => {
                            let shards = shard_non_iid::<SimRng>(&train_set, k, config.data.shard_size, None)?;
                            let t: SharedTask = Arc::new(SoftmaxTask::new(shards, Some(test_set.clone()))?);
                            shared = Some(t.clone());
                            t
                        }
                    }
                };
                tasks.insert(seed, task);
            }
        }
        TaskKind::Ridge => {
            let r = &config.ridge;
            for &seed in &config.experiment.seeds {
                let mut rng = stream_rng(seed, streams::DATA);
                let task = RidgeTask::synthetic(&mut rng, k, r.samples_per_node, r.features, r.ridge)?;
                tasks.insert(seed, Arc::new(task) as SharedTask);
            }
        }
    }
    Ok(tasks)
}

pub fn cell_geometry(config: &ExperimentConfig, seed: u64) -> Result<Geometry> {
    let mut rng = stream_rng(seed, streams::GEOMETRY);
    Geometry::sample_uniform(&mut rng, config.geometry.server, config.geometry.region, config.experiment.nodes)
}

pub fn cell_aggregation(config: &ExperimentConfig, cell: &CellSpec) -> Result<Aggregation> {
    let link = |noiseless| -> Result<Aggregation> {
        Ok(Aggregation::OverTheAir(AirCompLink {
            geometry: cell_geometry(config, cell.seed)?,
            params: config.channel_params(cell.antennas, cell.server_dbw),
            solver: config.solver.clone(),
            noiseless,
        }))
    };
    match config.experiment.aggregation {
        AggregationKind::Aircomp => link(false),
        AggregationKind::Noiseless => link(true),
        AggregationKind::Ideal => Ok(Aggregation::Ideal),
    }
}

/// Trains one cell without touching the filesystem.
pub fn run_cell<T: Task + ?Sized>(config: &ExperimentConfig, cell: &CellSpec, task: &T) -> Result<TrainLog> {
    let aggregation = cell_aggregation(config, cell)?;
    let train_config = TrainConfig {
        rounds: config.experiment.rounds,
        eta: config.experiment.eta,
        seed: cell.seed,
    };
    train(task, &train_config, &aggregation)
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn traces_csv(log: &TrainLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "subproblem", "iteration", "lambda", "residual", "omega"])?;
    for t in &log.traces {
        for (name, trace) in [("downlink", &t.downlink), ("uplink", &t.uplink)] {
            for s in &trace.steps {
                w.write_record([
                    t.round.to_string(),
                    name.to_string(),
                    s.iteration.to_string(),
                    format!("{:e}", s.lambda),
                    format!("{:e}", s.residual),
                    format!("{:e}", s.omega),
                ])?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_cell(out: &Path, cell: &CellSpec, log: &TrainLog) -> Result<()> {
    let mut rounds = Vec::new();
    write_round_log(&log.rounds, &mut rounds)?;
    write_atomic(&out.join("rounds").join(format!("{}.csv", cell.name())), &rounds)?;
    write_atomic(&out.join("traces").join(format!("{}.csv", cell.name())), &traces_csv(log)?)
}

pub fn write_summary(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for c in cells {
        w.write_record(c.record())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Validates, runs every cell in a worker pool and writes
/// `config.resolved.toml`, `rounds/<cell>.csv`, `traces/<cell>.csv`,
/// `summary.csv` and `plot_results.py` under the output directory.
pub fn run_experiment(config: &ExperimentConfig, mode: Mode) -> Result<ExperimentReport> {
    let report = validate_config(config, mode == Mode::Sweep)?;
    let out = config.experiment.output_dir.clone();
    fs::create_dir_all(out.join("rounds"))?;
    fs::create_dir_all(out.join("traces"))?;
    let mut echo = String::from("# resolved values\n");
    for line in &report.lines {
        echo.push_str(&format!("# {line}\n"));
    }
    echo.push('\n');
    echo.push_str(&config.to_toml());
    write_atomic(&out.join("config.resolved.toml"), echo.as_bytes())?;
    write_atomic(&out.join("plot_results.py"), PLOT_SCRIPT.as_bytes())?;

    let tasks = prepare_tasks(config)?;
    let cells = plan_cells(config, mode);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.experiment.threads)
        .build()
        .map_err(|e| Error::Unsupported(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<CellSummary>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let attempt = || -> Result<CellSummary> {
                    log::info!("cell {} started", cell.name());
                    let log = run_cell(config, cell, tasks[&cell.seed].as_ref())?;
                    write_cell(&out, cell, &log)?;
                    log::info!("cell {} finished", cell.name());
                    Ok(CellSummary::from_log(*cell, &log))
                };
                attempt().map_err(|source| Error::Cell {
                    cell: cell.name(),
                    source: Box::new(source),
                })
            })
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_summary(&out.join("summary.csv"), &summaries)?;
    Ok(ExperimentReport {
        output_dir: out,
        cells: summaries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> SelfCheck {
    SelfCheck { name, passed, detail }
}

fn reference_params(antennas: usize, nodes: usize) -> ChannelParams {
    ExperimentConfig {
        experiment: crate::config::ExperimentSection {
            nodes,
            ..Default::default()
        },
        ..Default::default()
    }
    .channel_params(antennas, 20.0)
}

/// Dataset-free consistency checks of the library's core identities.
pub fn selftest() -> Vec<SelfCheck> {
    let mut checks = Vec::new();
    let mut run = |name: &'static str, body: &dyn Fn() -> Result<(bool, String)>| {
        checks.push(match body() {
            Ok((passed, detail)) => check(name, passed, detail),
            Err(e) => check(name, false, e.to_string()),
        });
    };

    run("transceiver identities", &|| {
        let (k, n) = (12, 2);
        let geometry = Geometry::sample_uniform(
            &mut stream_rng(7, streams::GEOMETRY),
            [-50.0, 0.0, 10.0],
            [[0.0, 20.0], [-10.0, 10.0], [0.0, 0.0]],
            k,
        )?;
        let params = reference_params(n, k);
        let mut rng = stream_rng(7, streams::CHANNEL);
        let (mut forcing, mut mse_gap, mut power_gap) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..5 {
            let g = DMatrix::from_fn(k, 30, |_, _| gaussian(&mut rng));
            let (_, stats) = normalize(&g)?;
            let channel = draw_realization(&mut rng, &geometry, &params)?;
            let d = design(&channel, &stats, &SolverOptions::default())?.design;
            forcing = forcing.max(audit_uniform_forcing(&d, &channel).max_residual());
            for j in 0..k {
                let a = node_mse(&d, &channel, j);
                mse_gap = mse_gap.max((a - node_mse_closed_form(&d, &channel, j)).abs() / a);
            }
            power_gap = power_gap.max((server_power(&d, &channel, &stats) / channel.server_power - 1.0).abs());
        }
        Ok((
            forcing <= 1e-8 && mse_gap <= 1e-10 && power_gap <= 1e-6,
            format!("forcing residual {forcing:.2e}, MSE identity gap {mse_gap:.2e}, server power gap {power_gap:.2e}"),
        ))
    });

    run("solver vs grid search", &|| {
        let mut rng = stream_rng(11, 0);
        let vectors: Vec<CVector> = (0..3)
            .map(|_| CVector::from_fn(2, |_, _| Complex64::new(gaussian(&mut rng), gaussian(&mut rng))))
            .collect();
        let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
        let problem = LiftedProblem::new(vectors, weights)?;
        let solution = solve(&problem, &SolverOptions::default())?;
        let mut best = f64::INFINITY;
        for i in 0..=360 {
            let alpha = std::f64::consts::FRAC_PI_2 * i as f64 / 360.0;
            for j in 0..720 {
                let psi = std::f64::consts::TAU * j as f64 / 720.0;
                let x = CVector::from_vec(vec![
                    Complex64::new(alpha.cos(), 0.0),
                    Complex64::from_polar(alpha.sin(), psi),
                ]);
                best = best.min(problem.value(&x));
            }
        }
        let gap = solution.value / best - 1.0;
        Ok((gap <= 0.01, format!("solver {:.6e}, grid {best:.6e}, relative gap {gap:.2e}", solution.value)))
    });

    run("gradient finite differences", &|| {
        let mut rng = stream_rng(13, 0);
        let ridge = RidgeTask::synthetic(&mut rng, 2, 12, 5, 0.1)?;
        let features = DMatrix::from_fn(25, 8, |_, _| rng.random_range(0.0..1.0));
        let labels = (0..25).map(|i| (i * 7 % 10) as u8).collect();
        let data = LabeledDataset::new(features, labels)?;
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let theta = DVector::from_fn(80, |_, _| 0.1 * gaussian(&mut rng));
            let dir = DVector::from_fn(80, |_, _| gaussian(&mut rng)).normalize();
            let h = 1e-4;
            let fd = (softmax_loss(&(&theta + &dir * h), &data) - softmax_loss(&(&theta - &dir * h), &data)) / (2.0 * h);
            let an = softmax_gradient(&theta, &data)?.dot(&dir);
            worst = worst.max((fd - an).abs() / an.abs().max(1e-12));

            let theta = DVector::from_fn(5, |_, _| gaussian(&mut rng));
            let dir = DVector::from_fn(5, |_, _| gaussian(&mut rng)).normalize();
            let fd = (ridge.global_loss(&(&theta + &dir * h)) - ridge.global_loss(&(&theta - &dir * h))) / (2.0 * h);
            let an = ridge.global_gradient(&theta).dot(&dir);
            worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
        }
        Ok((worst <= 1e-5, format!("worst relative mismatch {worst:.2e}")))
    });

    run("noiseless link equals centralized descent", &|| {
        let k = 6;
        let task = RidgeTask::synthetic(&mut stream_rng(17, 0), k, 10, 4, 0.1)?;
        let eta = 1.0 / task.curvature().1;
        let geometry = Geometry::sample_uniform(
            &mut stream_rng(17, streams::GEOMETRY),
            [-50.0, 0.0, 10.0],
            [[0.0, 20.0], [-10.0, 10.0], [0.0, 0.0]],
            k,
        )?;
        let link = AirCompLink {
            geometry,
            params: reference_params(2, k),
            solver: SolverOptions::default(),
            noiseless: true,
        };
        let log = train(&task, &TrainConfig { rounds: 10, eta, seed: 17 }, &Aggregation::OverTheAir(link))?;
        let mut theta = DVector::zeros(4);
        for _ in 0..10 {
            theta -= task.global_gradient(&theta) * eta;
        }
        let gap = (0..k).map(|j| (log.thetas.column(j) - &theta).amax()).fold(0.0, f64::max);
        Ok((gap <= 1e-9, format!("max parameter deviation {gap:.2e}")))
    });

    run("convergence bound", &|| {
        let b = theorem1_bound(1.0, 0.5, 2.0, &[0.0; 10])?;
        let geometric = (b[9] - 0.75f64.powi(10)).abs() <= 1e-15;
        let floor = theorem1_bound(1.0, 0.5, 2.0, &vec![0.2; 3000])?;
        let limit = (floor[2999] - 0.2).abs() <= 1e-12;
        Ok((geometric && limit, format!("zero-error bound {:.6e}, noise floor {:.6e}", b[9], floor[2999])))
    });

    checks
}
