//! Reconstruction metrics, benchmark statistics and CSV exports.
//!
//! The normalized generalization error is the relative L² error
//! `sqrt(Σ (Θ − ρ)² / Σ ρ²)` over the grid points `(t_n, x_i)` (row times
//! and cell centers) that lie between the first and the last agent.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{integrate_trajectories, AgentTrajectories};
use crate::error::{Error, Result};
use crate::godunov::{simulate, DensityField, Domain, ScenarioSpec};
use crate::pinn::PinnModel;
use crate::sensing::{measure, MeasurementSet, NoiseConfig};
use crate::train::{train, ModelConfig, StageSchedule, TrainReport};

/// Grid subsets over which errors are accumulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Inside,
    /// Inside the envelope and `t ≥ t0`.
    InsideFrom(f64),
    /// Inside the envelope and `t < t0`.
    InsideBefore(f64),
    /// Outside the envelope, or after the trajectories end.
    Outside,
}

fn inside(traj: &AgentTrajectories, t: f64, x: f64) -> bool {
    let n = traj.n_agents();
    t <= traj.t_end() * (1.0 + 1e-12) && traj.position_at(0, t) <= x && x <= traj.position_at(n - 1, t)
}

fn in_region(region: Region, traj: &AgentTrajectories, t: f64, x: f64) -> bool {
    match region {
        Region::Inside => inside(traj, t, x),
        Region::InsideFrom(t0) => t >= t0 && inside(traj, t, x),
        Region::InsideBefore(t0) => t < t0 && inside(traj, t, x),
        Region::Outside => !inside(traj, t, x),
    }
}

/// `Θ` on every grid point of `field`, row-major by time.
pub fn reconstruct_grid(model: &PinnModel, field: &DensityField) -> Vec<Vec<f64>> {
    (0..field.n_rows())
        .map(|n| {
            let t = field.time(n);
            let pts: Vec<(f64, f64)> = (0..field.n_cells()).map(|i| (t, field.domain.cell_center(i))).collect();
            model.densities(&pts)
        })
        .collect()
}

/// Relative L² error of `recon` (same layout as [`reconstruct_grid`])
/// against `field` over `region`.
pub fn relative_error_on_grid(
    recon: &[Vec<f64>],
    field: &DensityField,
    traj: &AgentTrajectories,
    region: Region,
) -> Result<f64> {
    if traj.n_agents() == 0 {
        return Err(Error::Geometry("no agents".into()));
    }
    let (mut num, mut den, mut count) = (0.0, 0.0, 0usize);
    for (n, row) in recon.iter().enumerate() {
        let t = field.time(n);
        let truth = field.row(n);
        for (i, &r) in row.iter().enumerate() {
            if in_region(region, traj, t, field.domain.cell_center(i)) {
                num += (r - truth[i]).powi(2);
                den += truth[i] * truth[i];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Geometry(format!("no grid points in region {region:?}")));
    }
    if den == 0.0 {
        return Err(Error::Geometry("true density vanishes on the region".into()));
    }
    Ok((num / den).sqrt())
}

pub fn relative_error(
    model: &PinnModel,
    field: &DensityField,
    traj: &AgentTrajectories,
    region: Region,
) -> Result<f64> {
    relative_error_on_grid(&reconstruct_grid(model, field), field, traj, region)
}

/// Normalized generalization error inside the true agent envelope.
pub fn generalization_error(model: &PinnModel, field: &DensityField, traj: &AgentTrajectories) -> Result<f64> {
    relative_error(model, field, traj, Region::Inside)
}

/// RMS distance between `Φ` and the true trajectories over their samples.
pub fn trajectory_rmse(model: &PinnModel, traj: &AgentTrajectories) -> f64 {
    let mut sum = 0.0;
    for (n, &t) in traj.times.iter().enumerate() {
        let (pos, _) = model.trajectories(t);
        for (i, p) in pos.iter().enumerate() {
            sum += (p - traj.positions[i][n]).powi(2);
        }
    }
    (sum / (traj.times.len() * traj.n_agents()) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub generalization_error: f64,
    /// Inside the envelope, `t ≥ T/5`.
    pub error_late: f64,
    /// Inside the envelope, `t < T/5`.
    pub error_early: f64,
    pub error_outside: Option<f64>,
    pub trajectory_rmse: f64,
    pub seconds: f64,
}

pub fn evaluate(
    model: &PinnModel,
    field: &DensityField,
    traj: &AgentTrajectories,
    seconds: f64,
) -> Result<EvaluationReport> {
    let recon = reconstruct_grid(model, field);
    let t0 = field.domain.t_max / 5.0;
    Ok(EvaluationReport {
        generalization_error: relative_error_on_grid(&recon, field, traj, Region::Inside)?,
        error_late: relative_error_on_grid(&recon, field, traj, Region::InsideFrom(t0))?,
        error_early: relative_error_on_grid(&recon, field, traj, Region::InsideBefore(t0))?,
        error_outside: relative_error_on_grid(&recon, field, traj, Region::Outside).ok(),
        trajectory_rmse: trajectory_rmse(model, traj),
        seconds,
    })
}

/// Paths written by [`export_error_heatmap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapFiles {
    pub error: PathBuf,
    pub true_trajectories: PathBuf,
    pub reconstructed_trajectories: PathBuf,
}

/// Writes `|Θ − ρ|` on the field grid to `path` (same layout as
/// [`DensityField::write_csv`]), and the true and reconstructed trajectories
/// next to it as `<stem>_true_trajectories.csv` and
/// `<stem>_reconstructed_trajectories.csv`.
pub fn export_error_heatmap(
    model: &PinnModel,
    field: &DensityField,
    traj: &AgentTrajectories,
    path: impl AsRef<Path>,
) -> Result<HeatmapFiles> {
    let path = path.as_ref();
    let rows: Vec<Vec<f64>> = reconstruct_grid(model, field)
        .into_iter()
        .enumerate()
        .map(|(n, r)| r.iter().zip(field.row(n)).map(|(a, b)| (a - b).abs()).collect())
        .collect();
    DensityField::from_rows(field.domain, field.v_f, field.dt, rows)?.write_csv(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    let sibling = |suffix: &str| path.with_file_name(format!("{stem}_{suffix}.csv"));
    let files = HeatmapFiles {
        error: path.to_path_buf(),
        true_trajectories: sibling("true_trajectories"),
        reconstructed_trajectories: sibling("reconstructed_trajectories"),
    };
    traj.write_csv(&files.true_trajectories)?;
    let mut positions = vec![Vec::with_capacity(traj.times.len()); traj.n_agents()];
    let mut speeds = positions.clone();
    for &t in &traj.times {
        let (p, v) = model.trajectories(t);
        for i in 0..traj.n_agents() {
            positions[i].push(p[i]);
            speeds[i].push(v[i]);
        }
    }
    AgentTrajectories { times: traj.times.clone(), positions, speeds, truncated: traj.truncated }
        .write_csv(&files.reconstructed_trajectories)?;
    Ok(files)
}

/// A complete reconstruction experiment: ground truth, sensing and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub domain: Domain,
    pub scenario: ScenarioSpec,
    /// Initial agent positions, increasing.
    pub agents: Vec<f64>,
    pub n_data: usize,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "StageSchedule::staged")]
    pub schedule: StageSchedule,
}

impl Experiment {
    /// Five agents on a 1 km road over 0.6 min with `V_f = 1` km/min, a
    /// random piecewise-constant start and boundary inflow, 100 cells.
    pub fn fixture() -> Self {
        Self {
            domain: Domain::new(0.6, 0.0, 1.0, 100).expect("valid domain"),
            scenario: ScenarioSpec::random(42, 1.0),
            agents: vec![0.1, 0.175, 0.25, 0.325, 0.4],
            n_data: 100,
            noise: NoiseConfig::noiseless(),
            model: ModelConfig::default(),
            schedule: StageSchedule::staged(),
        }
    }

    /// The fixture with unbiased density noise `σ_ρ = 0.2` and a Brownian
    /// position error of 2 m²/s (`1.2e-4` km²/min).
    pub fn noisy_fixture() -> Self {
        Self { noise: NoiseConfig { sigma_rho: 0.2, mu_rho: 0.0, sigma_y: 1.2e-4, seed: 0 }, ..Self::fixture() }
    }

    pub fn truth(&self) -> Result<(DensityField, AgentTrajectories)> {
        let field = simulate(&self.scenario, &self.domain)?;
        let traj = integrate_trajectories(&field, &self.agents)?;
        Ok((field, traj))
    }

    pub fn measurements(&self, field: &DensityField, traj: &AgentTrajectories, seed: u64) -> Result<MeasurementSet> {
        measure(field, traj, self.n_data, &NoiseConfig { seed, ..self.noise })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Staged,
    Naive,
}

impl Mode {
    pub fn schedule(&self, exp: &Experiment) -> StageSchedule {
        match self {
            Mode::Staged => exp.schedule.clone(),
            Mode::Naive => StageSchedule::naive(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub evaluation: Option<EvaluationReport>,
    pub training: Option<TrainReport>,
    pub failure: Option<String>,
}

/// Measures with `seed`, trains from an initialization drawn from `seed`,
/// and evaluates against the truth.
pub fn run_once(exp: &Experiment, field: &DensityField, traj: &AgentTrajectories, mode: Mode, seed: u64) -> RunResult {
    let attempt = || -> std::result::Result<(EvaluationReport, TrainReport), String> {
        let ms = exp.measurements(field, traj, seed).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let (model, report) = train(&ms, &exp.model, &mode.schedule(exp), seed).map_err(|e| e.to_string())?;
        let seconds = start.elapsed().as_secs_f64();
        let eval = evaluate(&model, field, traj, seconds).map_err(|e| e.to_string())?;
        Ok((eval, report))
    };
    match attempt() {
        Ok((e, r)) => RunResult { seed, evaluation: Some(e), training: Some(r), failure: None },
        Err(msg) => RunResult { seed, evaluation: None, training: None, failure: Some(msg) },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub count: usize,
}

impl Statistics {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, median, std, count: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub mode: Mode,
    pub runs: Vec<RunResult>,
    pub error: Option<Statistics>,
    pub seconds: Option<Statistics>,
}

impl BenchmarkReport {
    pub fn from_runs(mode: Mode, runs: Vec<RunResult>) -> Self {
        let ok: Vec<&EvaluationReport> = runs.iter().filter_map(|r| r.evaluation.as_ref()).collect();
        let errors: Vec<f64> = ok.iter().map(|e| e.generalization_error).collect();
        let times: Vec<f64> = ok.iter().map(|e| e.seconds).collect();
        Self { mode, error: Statistics::of(&errors), seconds: Statistics::of(&times), runs }
    }
}

/// `n_runs` independent runs with seeds `base_seed, base_seed + 1, …`.
/// Failed runs are recorded and excluded from the statistics.
pub fn benchmark(exp: &Experiment, n_runs: usize, mode: Mode, base_seed: u64) -> Result<BenchmarkReport> {
    if n_runs == 0 {
        return Err(Error::config("benchmark needs at least one run"));
    }
    let (field, traj) = exp.truth()?;
    let runs: Vec<RunResult> =
        (0..n_runs as u64).into_par_iter().map(|i| run_once(exp, &field, &traj, mode, base_seed + i)).collect();
    Ok(BenchmarkReport::from_runs(mode, runs))
}
