//! Multi-stage training of a [`PinnModel`] and the single-stage baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::Greenshields;
use crate::nn::default_theta_size;
use crate::optim::{adam_minimize, lbfgs_minimize, AdamConfig, LbfgsConfig, LbfgsState, Masked, Termination};
use crate::pinn::{Block, LossKind, LossTerms, LossWeights, PinnLoss, PinnModel};
use crate::sensing::{sample_collocation, MeasurementSet, Standardizer};

/// One optimization stage: a loss, the blocks held fixed, and the optimizer
/// budgets. Adam runs first when `adam_iters > 0`, then L-BFGS if configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    #[serde(default = "coupled")]
    pub kind: LossKind,
    pub weights: LossWeights,
    #[serde(default)]
    pub frozen: Vec<Block>,
    #[serde(default)]
    pub adam_iters: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub lbfgs: Option<LbfgsConfig>,
}

fn coupled() -> LossKind {
    LossKind::Coupled
}

fn lbfgs(max_iter: usize) -> Option<LbfgsConfig> {
    Some(LbfgsConfig { max_iter, ..LbfgsConfig::default() })
}

impl Stage {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.adam_iters == 0 && self.lbfgs.is_none() {
            return Err(Error::config(format!("stage `{}` has no optimizer", self.name)));
        }
        if self.frozen.len() >= Block::ALL.len() && Block::ALL.iter().all(|b| self.frozen.contains(b)) {
            return Err(Error::config(format!("stage `{}` freezes every block", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

impl StageSchedule {
    /// Trajectory smoothing, then density fit with `Φ` fixed, then joint
    /// refinement with the bias.
    pub fn staged() -> Self {
        Self {
            stages: vec![
                Stage {
                    name: "trajectories".into(),
                    kind: LossKind::Coupled,
                    weights: LossWeights::new(0.0, 0.0, 1.0, 0.5, 0.0),
                    frozen: vec![Block::Gamma, Block::Bias],
                    adam_iters: 0,
                    adam: AdamConfig::default(),
                    lbfgs: Some(LbfgsConfig { max_iter: 500, grad_tol: 1e-5, ..LbfgsConfig::default() }),
                },
                Stage {
                    name: "density".into(),
                    kind: LossKind::Coupled,
                    weights: LossWeights::new(1.0, 0.1, 0.0, 0.25, 0.0),
                    frozen: vec![Block::Phi, Block::Bias],
                    adam_iters: 1000,
                    adam: AdamConfig::default(),
                    lbfgs: lbfgs(2000),
                },
                Stage {
                    name: "joint".into(),
                    kind: LossKind::Coupled,
                    weights: LossWeights::new(1.0, 1.0, 1.0, 0.5, 0.1),
                    frozen: vec![],
                    adam_iters: 0,
                    adam: AdamConfig::default(),
                    lbfgs: lbfgs(3000),
                },
            ],
        }
    }

    /// All terms and blocks at once, L-BFGS from the initialization.
    pub fn naive() -> Self {
        let mut joint = Self::staged().stages.pop().expect("three stages");
        joint.name = "naive".into();
        Self { stages: vec![joint] }
    }

    /// Density network and `γ` against known positions, no viscosity penalty.
    pub fn density_only(max_iter: usize) -> Self {
        Self {
            stages: vec![Stage {
                name: "density_only".into(),
                kind: LossKind::Noiseless,
                weights: LossWeights::new(1.0, 1.0, 0.0, 0.0, 0.0),
                frozen: vec![Block::Phi, Block::Bias],
                adam_iters: 0,
                adam: AdamConfig::default(),
                lbfgs: lbfgs(max_iter),
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("schedule has no stages"));
        }
        self.stages.iter().try_for_each(Stage::validate)
    }

    /// Multiplies every iteration budget by `factor` (at least one iteration
    /// is kept for each optimizer that was enabled).
    pub fn scaled(mut self, factor: f64) -> Self {
        let scale = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        for st in &mut self.stages {
            if st.adam_iters > 0 {
                st.adam_iters = scale(st.adam_iters);
            }
            if let Some(l) = st.lbfgs.as_mut() {
                l.max_iter = scale(l.max_iter);
            }
        }
        self
    }
}

/// Network sizes, initial `γ` and collocation counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub theta_hidden: Option<usize>,
    #[serde(default)]
    pub theta_width: Option<usize>,
    #[serde(default = "default_gamma")]
    pub gamma_init: f64,
    #[serde(default = "default_n_f")]
    pub n_f: usize,
    #[serde(default = "default_n_g")]
    pub n_g: usize,
}

fn default_gamma() -> f64 {
    0.1
}
fn default_n_f() -> usize {
    2000
}
fn default_n_g() -> usize {
    200
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { theta_hidden: None, theta_width: None, gamma_init: 0.1, n_f: 2000, n_g: 200 }
    }
}

const THETA_OUTPUT_SHRINK: f64 = 0.1;

impl ModelConfig {
    /// Fresh model whose density network starts near the mean measured
    /// density.
    pub fn build(&self, ms: &MeasurementSet, seed: u64) -> Result<PinnModel> {
        let (h, w) = default_theta_size(ms.domain.t_max, ms.domain.length());
        let std = Standardizer::new(&ms.domain)?;
        let flux = Greenshields::new(ms.v_f)?;
        let all: Vec<f64> = ms.densities.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
        let mut model = PinnModel::new(
            ms.n_agents(),
            self.theta_hidden.unwrap_or(h),
            self.theta_width.unwrap_or(w),
            std,
            flux,
            self.gamma_init,
            seed,
        )?;
        model.center_density(mean.clamp(0.0, 1.0), THETA_OUTPUT_SHRINK);
        Ok(model)
    }
}

/// Adds collocation points inside the envelope of the measured positions
/// unless the set already carries them.
pub fn prepare(ms: &MeasurementSet, cfg: &ModelConfig, seed: u64) -> Result<MeasurementSet> {
    ms.validate()?;
    if ms.standardized {
        return Err(Error::config("training expects physical coordinates"));
    }
    if !ms.collocation.points.is_empty() && !ms.collocation.ode_times.is_empty() {
        return Ok(ms.clone());
    }
    let col = sample_collocation(&ms.measured_trajectories(), cfg.n_f, cfg.n_g, seed)?;
    Ok(ms.clone().with_collocation(col))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    /// Loss after every accepted step, Adam iterations first.
    pub trace: Vec<f64>,
    pub termination: Termination,
    pub evaluations: usize,
    pub seconds: f64,
    pub terms: LossTerms,
}

impl StageReport {
    pub fn final_loss(&self) -> f64 {
        self.terms.total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub n_params: usize,
    pub stages: Vec<StageReport>,
    pub seconds: f64,
    pub gamma_sq: f64,
    pub bias: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.final_loss())
    }

    /// Report with every wall-clock field zeroed, for comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.seconds = 0.0;
        for s in &mut r.stages {
            s.seconds = 0.0;
        }
        r
    }
}

/// A stage failed; `checkpoint` holds the last finite parameters, if a
/// model had been built.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct TrainError {
    pub stage: String,
    #[source]
    pub source: Error,
    pub checkpoint: Option<Box<PinnModel>>,
}

impl TrainError {
    pub fn is_config(&self) -> bool {
        self.source.is_config()
    }
}

fn run_stage(model: &mut PinnModel, ms: &MeasurementSet, stage: &Stage) -> Result<StageReport> {
    let start = Instant::now();
    let template = model.clone();
    let loss = PinnLoss::new(&template, ms, stage.weights, stage.kind)?;
    let free: Vec<usize> =
        Block::ALL.iter().filter(|b| !stage.frozen.contains(b)).flat_map(|&b| model.block_range(b)).collect();
    let masked = Masked::new(&loss, template.pack(), free);
    let mut x = masked.free_params();
    let mut trace = Vec::new();
    let mut evaluations = 0;
    let mut termination = Termination::MaxIter;
    if stage.adam_iters > 0 {
        let out = adam_minimize(&masked, &x, stage.adam_iters, stage.adam)?;
        x = out.params;
        trace.extend(out.trace);
        evaluations += out.evaluations;
        termination = out.termination;
    }
    if let (Some(cfg), false) = (stage.lbfgs, matches!(termination, Termination::NonFinite(_))) {
        let out = lbfgs_minimize(&masked, &x, &mut LbfgsState::new(cfg))?;
        x = out.params;
        trace.extend(out.trace);
        evaluations += out.evaluations;
        termination = out.termination;
    }
    model.unpack(&masked.expand(&x))?;
    if let Termination::NonFinite(term) = &termination {
        let term = ["data", "pde", "gamma", "trajectory", "ode", "bias", "loss"]
            .into_iter()
            .find(|t| t == term)
            .unwrap_or("gradient");
        return Err(Error::NonFinite { term });
    }
    let terms = loss.terms(&model.pack())?;
    Ok(StageReport {
        name: stage.name.clone(),
        trace,
        termination,
        evaluations,
        seconds: start.elapsed().as_secs_f64(),
        terms,
    })
}

/// Runs `schedule` starting from `model`.
pub fn run_schedule(
    mut model: PinnModel,
    ms: &MeasurementSet,
    schedule: &StageSchedule,
) -> std::result::Result<(PinnModel, TrainReport), TrainError> {
    let fail = |stage: &str, source: Error, model: &PinnModel| TrainError {
        stage: stage.to_string(),
        source,
        checkpoint: Some(Box::new(model.clone())),
    };
    schedule.validate().map_err(|e| fail("schedule", e, &model))?;
    let start = Instant::now();
    let mut stages = Vec::with_capacity(schedule.stages.len());
    for stage in &schedule.stages {
        match run_stage(&mut model, ms, stage) {
            Ok(r) => stages.push(r),
            Err(e) => return Err(fail(&stage.name, e, &model)),
        }
    }
    let report = TrainReport {
        seed: model.seed,
        n_params: model.n_params(),
        stages,
        seconds: start.elapsed().as_secs_f64(),
        gamma_sq: model.gamma * model.gamma,
        bias: model.bias.clone(),
    };
    Ok((model, report))
}

/// Builds a model from `cfg`, adds collocation points, and runs `schedule`.
pub fn train(
    ms: &MeasurementSet,
    cfg: &ModelConfig,
    schedule: &StageSchedule,
    seed: u64,
) -> std::result::Result<(PinnModel, TrainReport), TrainError> {
    let setup = || -> Result<(PinnModel, MeasurementSet)> { Ok((cfg.build(ms, seed)?, prepare(ms, cfg, seed)?)) };
    let (model, data) = setup().map_err(|source| TrainError { stage: "setup".into(), source, checkpoint: None })?;
    run_schedule(model, &data, schedule)
}

pub fn staged_train(
    ms: &MeasurementSet,
    cfg: &ModelConfig,
    seed: u64,
) -> std::result::Result<(PinnModel, TrainReport), TrainError> {
    train(ms, cfg, &StageSchedule::staged(), seed)
}

pub fn naive_train(
    ms: &MeasurementSet,
    cfg: &ModelConfig,
    seed: u64,
) -> std::result::Result<(PinnModel, TrainReport), TrainError> {
    train(ms, cfg, &StageSchedule::naive(), seed)
}
