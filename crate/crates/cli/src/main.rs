use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use trafficrecon::report::{benchmark, evaluate, export_error_heatmap, BenchmarkReport, Experiment, Mode, Statistics};
use trafficrecon::train::{train, TrainError, TrainReport};
use trafficrecon::{
    integrate_trajectories, simulate, AgentTrajectories, DensityField, Error, MeasurementSet, PinnModel,
};

#[derive(Parser)]
#[command(name = "trafficrecon", version, about = "Traffic density reconstruction from probe vehicles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    config: PathBuf,
    /// Run seed: measurement noise, collocation and initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write an experiment config with the built-in fixture.
    Init {
        path: PathBuf,
        #[arg(long)]
        noisy: bool,
    },
    /// Ground-truth density and probe trajectories.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Noisy measurements from a simulated field.
    Measure {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
    },
    /// Fit the reconstruction networks to measurements.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Staged)]
        mode: ModeArg,
    },
    /// Compare a trained model against the ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Training report, for the wall-clock time.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Repeated runs with consecutive seeds starting at `--seed`.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, value_enum, default_value_t = BenchMode::Both)]
        mode: BenchMode,
    },
    /// simulate, measure, train and evaluate in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ModeArg::Staged)]
        mode: ModeArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Staged,
    Naive,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Staged => Mode::Staged,
            ModeArg::Naive => Mode::Naive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Staged,
    Naive,
    Both,
}

const FIELD: &str = "field.bin";
const FIELD_CSV: &str = "field.csv";
const TRAJECTORIES: &str = "trajectories.json";
const TRAJECTORIES_CSV: &str = "trajectories.csv";
const MEASUREMENTS: &str = "measurements.json";
const MODEL: &str = "model.ckpt";
const PARTIAL_MODEL: &str = "model.partial.ckpt";
const TRAIN_REPORT: &str = "train_report.json";
const EVALUATION: &str = "evaluation.json";
const HEATMAP: &str = "error_heatmap.csv";

fn load_config(path: &Path) -> Result<Experiment> {
    let text = fs::read_to_string(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))?;
    let exp: Experiment =
        serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("parsing {}", path.display()))?;
    exp.domain.validate()?;
    exp.schedule.validate()?;
    if exp.agents.is_empty() {
        return Err(Error::Config("no agents configured".into()).into());
    }
    Ok(exp)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(Error::from)?;
    Ok(&common.out)
}

fn trajectories(exp: &Experiment, field: &DensityField) -> Result<AgentTrajectories> {
    Ok(integrate_trajectories(field, &exp.agents)?)
}

fn do_simulate(exp: &Experiment, out: &Path) -> Result<DensityField> {
    let field = simulate(&exp.scenario, &exp.domain)?;
    let traj = trajectories(exp, &field)?;
    field.write_binary(out.join(FIELD))?;
    field.write_csv(out.join(FIELD_CSV))?;
    traj.write_csv(out.join(TRAJECTORIES_CSV))?;
    write_json(&out.join(TRAJECTORIES), &traj)?;
    Ok(field)
}

fn do_measure(exp: &Experiment, field: &DensityField, seed: u64, out: &Path) -> Result<MeasurementSet> {
    let traj = trajectories(exp, field)?;
    let ms = exp.measurements(field, &traj, seed)?;
    ms.save(out.join(MEASUREMENTS))?;
    Ok(ms)
}

fn do_train(
    exp: &Experiment,
    ms: &MeasurementSet,
    mode: Mode,
    seed: u64,
    out: &Path,
) -> Result<(PinnModel, TrainReport)> {
    match train(ms, &exp.model, &mode.schedule(exp), seed) {
        Ok((model, report)) => {
            model.save(out.join(MODEL))?;
            write_json(&out.join(TRAIN_REPORT), &report)?;
            Ok((model, report))
        }
        Err(e) => {
            if let Some(m) = &e.checkpoint {
                m.save(out.join(PARTIAL_MODEL))?;
            }
            Err(e.into())
        }
    }
}

fn do_evaluate(exp: &Experiment, field: &DensityField, model: &PinnModel, seconds: f64, out: &Path) -> Result<()> {
    let traj = trajectories(exp, field)?;
    let report = evaluate(model, field, &traj, seconds)?;
    export_error_heatmap(model, field, &traj, out.join(HEATMAP))?;
    write_json(&out.join(EVALUATION), &report)?;
    println!(
        "generalization error {:.4e} (t >= T/5: {:.4e}), trajectory rmse {:.4e}",
        report.generalization_error, report.error_late, report.trajectory_rmse
    );
    Ok(())
}

#[derive(Serialize)]
struct Comparison {
    staged: BenchmarkReport,
    naive: BenchmarkReport,
    /// naive / staged median error.
    error_ratio: Option<f64>,
    /// staged / naive median time.
    time_ratio: Option<f64>,
}

fn ratio(a: Option<Statistics>, b: Option<Statistics>) -> Option<f64> {
    Some(a?.median / b?.median)
}

fn summarize(b: &BenchmarkReport) {
    let failed = b.runs.iter().filter(|r| r.failure.is_some()).count();
    match (b.error, b.seconds) {
        (Some(e), Some(t)) => println!(
            "{:?}: error mean {:.4e} median {:.4e} std {:.4e}; time mean {:.1}s median {:.1}s; {failed} failed",
            b.mode, e.mean, e.median, e.std, t.mean, t.median
        ),
        _ => println!("{:?}: all {failed} runs failed", b.mode),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { path, noisy } => {
            let exp = if noisy { Experiment::noisy_fixture() } else { Experiment::fixture() };
            write_json(&path, &exp)?;
        }
        Command::Simulate { common } => {
            let exp = load_config(&common.config)?;
            do_simulate(&exp, out_dir(&common)?)?;
        }
        Command::Measure { common, field } => {
            let exp = load_config(&common.config)?;
            let field = DensityField::read_binary(&field)?;
            do_measure(&exp, &field, common.seed, out_dir(&common)?)?;
        }
        Command::Train { common, data, mode } => {
            let exp = load_config(&common.config)?;
            let ms = MeasurementSet::load(&data)?;
            let (_, report) = do_train(&exp, &ms, mode.into(), common.seed, out_dir(&common)?)?;
            println!("final loss {:.6e} in {:.1}s", report.final_loss(), report.seconds);
        }
        Command::Evaluate { common, field, model, report } => {
            let exp = load_config(&common.config)?;
            let field = DensityField::read_binary(&field)?;
            let model = PinnModel::load(&model)?;
            let seconds = match report {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(Error::from)?;
                    serde_json::from_str::<TrainReport>(&text).map_err(Error::from)?.seconds
                }
                None => 0.0,
            };
            do_evaluate(&exp, &field, &model, seconds, out_dir(&common)?)?;
        }
        Command::Benchmark { common, runs, mode } => {
            let exp = load_config(&common.config)?;
            let out = out_dir(&common)?;
            let mut reports = Vec::new();
            for m in match mode {
                BenchMode::Staged => vec![Mode::Staged],
                BenchMode::Naive => vec![Mode::Naive],
                BenchMode::Both => vec![Mode::Staged, Mode::Naive],
            } {
                let b = benchmark(&exp, runs, m, common.seed)?;
                summarize(&b);
                let name = format!("benchmark_{}.json", if m == Mode::Staged { "staged" } else { "naive" });
                write_json(&out.join(name), &b)?;
                reports.push(b);
            }
            if let [staged, naive] = &reports[..] {
                let cmp = Comparison {
                    error_ratio: ratio(naive.error, staged.error),
                    time_ratio: ratio(staged.seconds, naive.seconds),
                    staged: staged.clone(),
                    naive: naive.clone(),
                };
                write_json(&out.join("benchmark_comparison.json"), &cmp)?;
            }
        }
        Command::Pipeline { common, mode } => {
            let exp = load_config(&common.config)?;
            let out = out_dir(&common)?;
            let field = do_simulate(&exp, out)?;
            let ms = do_measure(&exp, &field, common.seed, out)?;
            let (model, report) = do_train(&exp, &ms, mode.into(), common.seed, out)?;
            do_evaluate(&exp, &field, &model, report.seconds, out)?;
        }
    }
    Ok(())
}

/// 2 for bad configuration or inputs, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<TrainError>() {
        return if e.is_config() { 2 } else { 3 };
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg.push_str(if msg.is_empty() { "" } else { ": " });
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
