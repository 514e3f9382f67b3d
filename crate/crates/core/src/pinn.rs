//! Physics-informed losses over the density network `Θ` and the
//! trajectory network `Φ`.
//!
//! The viscous residual is `F_γ = ρ_t + f'(ρ) ρ_x − γ² ρ_xx` and the agent
//! residual is `G = ẏ − V(ρ)`. Two losses are provided: the measurement
//! plus residual loss with known agent positions, and the coupled loss
//! in which `Φ` supplies the positions, a bias vector `n̄_ρ` is subtracted
//! from the measured densities, and the trajectory and agent-dynamics
//! terms are added.

use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{ConcaveFlux, Greenshields};
use crate::nn::{
    read_checkpoint, write_checkpoint, Channels, CheckpointHeader, DenseNetwork, PhiNet, ThetaJet, ThetaNet,
};
use crate::optim::Objective;
use crate::sensing::{MeasurementSet, Standardizer};

/// Weights of the loss terms. `bias_l2` is an optional ridge penalty on
/// `n̄_ρ`, off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda_gamma: f64,
    #[serde(default)]
    pub bias_l2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64, lambda_gamma: f64) -> Self {
        Self { lambda1, lambda2, lambda3, lambda4, lambda_gamma, bias_l2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda_gamma, self.bias_l2];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Parameter blocks of a [`PinnModel`], in flat-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Theta,
    Phi,
    Gamma,
    Bias,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Theta, Block::Phi, Block::Gamma, Block::Bias];
}

/// Anything that can report a density with its derivatives, e.g. the
/// density network or a closed-form profile.
pub trait DensitySurface {
    fn jet(&self, t: f64, x: f64) -> ThetaJet;
}

/// `F_γ` evaluated on any density surface. The characteristic speed is
/// applied to the raw value, without a `[0, 1]` check.
pub fn residual_of(surface: &impl DensitySurface, flux: &impl ConcaveFlux, gamma: f64, t: f64, x: f64) -> f64 {
    let j = surface.jet(t, x);
    j.dt + flux.characteristic_speed_raw(j.value) * j.dx - gamma * gamma * j.dxx
}

/// Density network, trajectory network, viscosity root `γ` and bias `n̄_ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnModel {
    pub theta: ThetaNet,
    pub phi: PhiNet,
    pub gamma: f64,
    pub bias: Vec<f64>,
    pub standardizer: Standardizer,
    pub flux: Greenshields,
    pub seed: u64,
}

const STREAM_THETA: u64 = 11;
const STREAM_PHI: u64 = 12;

impl PinnModel {
    pub fn new(
        n_agents: usize,
        theta_hidden: usize,
        theta_width: usize,
        standardizer: Standardizer,
        flux: Greenshields,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::config("at least one agent is required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_THETA);
        let theta = ThetaNet::new(theta_hidden, theta_width, &mut rng)?;
        rng.set_stream(STREAM_PHI);
        rng.set_word_pos(0);
        let phi = PhiNet::new(n_agents, &mut rng)?;
        Ok(Self { theta, phi, gamma, bias: vec![0.0; n_agents], standardizer, flux, seed })
    }

    pub fn n_agents(&self) -> usize {
        self.bias.len()
    }

    /// Shrinks the output weights of `Θ` by `shrink` and sets its output
    /// bias to `level`, so the initial density sits inside `[0, 1]` where
    /// the agent speed law has a non-zero slope.
    pub fn center_density(&mut self, level: f64, shrink: f64) {
        let net = &mut self.theta.net;
        let n = net.params.len();
        let width = net.arch.sizes[net.arch.sizes.len() - 2];
        for p in &mut net.params[n - 1 - width..n - 1] {
            *p *= shrink;
        }
        net.params[n - 1] = level;
    }

    pub fn n_params(&self) -> usize {
        self.theta.net.n_params() + self.phi.n_params() + 1 + self.bias.len()
    }

    pub fn block_range(&self, block: Block) -> Range<usize> {
        let a = self.theta.net.n_params();
        let b = a + self.phi.n_params();
        match block {
            Block::Theta => 0..a,
            Block::Phi => a..b,
            Block::Gamma => b..b + 1,
            Block::Bias => b + 1..b + 1 + self.bias.len(),
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = self.theta.net.pack();
        v.extend(self.phi.pack());
        v.push(self.gamma);
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn unpack(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::config(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let theta = self.block_range(Block::Theta);
        let phi = self.block_range(Block::Phi);
        let gamma = self.block_range(Block::Gamma);
        let bias = self.block_range(Block::Bias);
        self.theta.net.unpack(&flat[theta])?;
        self.phi.unpack(&flat[phi])?;
        self.gamma = flat[gamma.start];
        self.bias.copy_from_slice(&flat[bias]);
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.unpack(flat)?;
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        self.pack().iter().all(|v| v.is_finite())
    }

    /// Reconstructed density at physical `(t, x)`.
    pub fn density(&self, t: f64, x: f64) -> f64 {
        self.theta.value(&self.standardizer, t, x)
    }

    pub fn densities(&self, points: &[(f64, f64)]) -> Vec<f64> {
        self.theta.values(&self.standardizer, points)
    }

    /// Reconstructed agent positions and velocities at `t`.
    pub fn trajectories(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        crate::nn::phi_forward_derivs(&self.phi, &self.standardizer, t)
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format: "trafficrecon-pinn-v1".into(),
            seed: self.seed,
            standardizer: self.standardizer,
            theta: self.theta.net.arch.clone(),
            phi_smooth: self.phi.smooth.arch.clone(),
            phi_kinked: self.phi.kinked.arch.clone(),
            v_f: self.flux.v_f,
            n_params: self.n_params(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_header(), &self.pack())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, params) = read_checkpoint(path)?;
        let n_agents = h.phi_smooth.outputs();
        let mut model = Self {
            theta: ThetaNet::from_network(DenseNetwork::zeros(h.theta))?,
            phi: PhiNet {
                smooth: DenseNetwork::zeros(h.phi_smooth),
                kinked: DenseNetwork::zeros(h.phi_kinked),
                mix: [0.0; 2],
            },
            gamma: 0.0,
            bias: vec![0.0; n_agents],
            standardizer: h.standardizer,
            flux: Greenshields::new(h.v_f)?,
            seed: h.seed,
        };
        model.unpack(&params)?;
        Ok(model)
    }
}

impl DensitySurface for PinnModel {
    fn jet(&self, t: f64, x: f64) -> ThetaJet {
        crate::nn::theta_forward_derivs(&self.theta, &self.standardizer, t, x)
    }
}

/// `F_γ(Θ, t, x)` of the model's density network.
pub fn pde_residual(model: &PinnModel, t: f64, x: f64) -> f64 {
    residual_of(model, &model.flux, model.gamma, t, x)
}

/// `Φ̇_i(t) − V(clamp(Θ(t, Φ_i(t))))` for every agent.
pub fn ode_residual(model: &PinnModel, t: f64) -> Vec<f64> {
    let (pos, vel) = model.trajectories(t);
    let pts: Vec<(f64, f64)> = pos.iter().map(|&x| (t, x)).collect();
    let rho = model.densities(&pts);
    vel.iter().zip(rho).map(|(v, r)| v - model.flux.clamped_speed(r).0).collect()
}

/// Which loss an evaluator computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Measured positions taken as the true ones; `Θ` and `γ` only.
    Noiseless,
    /// `Φ` supplies positions; all five terms and the bias.
    Coupled,
}

/// Weighted contributions of each term; they sum to the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub data: f64,
    pub pde: f64,
    pub gamma: f64,
    pub trajectory: f64,
    pub ode: f64,
    pub bias: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.data + self.pde + self.gamma + self.trajectory + self.ode + self.bias
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("data", self.data),
            ("pde", self.pde),
            ("gamma", self.gamma),
            ("trajectory", self.trajectory),
            ("ode", self.ode),
            ("bias", self.bias),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name });
            }
        }
        Ok(())
    }
}

/// Loss evaluator over the flat parameter vector of `template`.
#[derive(Debug, Clone)]
pub struct PinnLoss<'a> {
    pub template: &'a PinnModel,
    pub data: &'a MeasurementSet,
    pub weights: LossWeights,
    pub kind: LossKind,
}

impl<'a> PinnLoss<'a> {
    pub fn new(
        template: &'a PinnModel,
        data: &'a MeasurementSet,
        weights: LossWeights,
        kind: LossKind,
    ) -> Result<Self> {
        weights.validate()?;
        data.validate()?;
        if data.standardized {
            return Err(Error::config("losses expect physical coordinates"));
        }
        if data.n_agents() != template.n_agents() {
            return Err(Error::config(format!(
                "model has {} agents, data has {}",
                template.n_agents(),
                data.n_agents()
            )));
        }
        if weights.lambda2 > 0.0 && data.collocation.points.is_empty() {
            return Err(Error::config("residual term needs collocation points"));
        }
        if kind == LossKind::Coupled && weights.lambda4 > 0.0 && data.collocation.ode_times.is_empty() {
            return Err(Error::config("agent residual term needs collocation instants"));
        }
        Ok(Self { template, data, weights, kind })
    }

    pub fn terms(&self, params: &[f64]) -> Result<LossTerms> {
        let mut grad = vec![0.0; params.len()];
        self.run(params, &mut grad)
    }

    fn run(&self, params: &[f64], grad: &mut [f64]) -> Result<LossTerms> {
        let model = self.template.with_params(params)?;
        let mut terms = LossTerms::default();
        let w = self.weights;
        let r_theta = model.block_range(Block::Theta);
        let g_idx = model.block_range(Block::Gamma).start;
        let r_bias = model.block_range(Block::Bias);
        let ms = self.data;
        let std = model.standardizer;
        let (ts, xs) = (std.t_scale(), std.x_scale());
        let n = model.n_agents();
        let nd = ms.n_data();

        match self.kind {
            LossKind::Noiseless => {
                if w.lambda1 > 0.0 {
                    let mut inp = Array2::zeros((2, nd * n));
                    for k in 0..nd {
                        for i in 0..n {
                            inp[[0, k * n + i]] = std.t_to_std(ms.times[k]);
                            inp[[1, k * n + i]] = std.x_to_std(ms.positions[k][i]);
                        }
                    }
                    let (out, tape) = model.theta.net.forward(inp.view(), Channels::VALUE);
                    let mut out_bar = Array2::zeros(out.raw_dim());
                    let c = w.lambda1 / nd as f64;
                    let mut sum = 0.0;
                    for k in 0..nd {
                        for i in 0..n {
                            let e = ms.densities[k][i] - out[[0, k * n + i]];
                            sum += e * e;
                            out_bar[[0, k * n + i]] = -2.0 * c * e;
                        }
                    }
                    terms.data = c * sum;
                    model.theta.net.backward(&tape, out_bar, &mut grad[r_theta.clone()]);
                }
            }
            LossKind::Coupled => self.coupled_terms(&model, &mut terms, grad)?,
        }

        if w.lambda2 > 0.0 {
            let pts = &ms.collocation.points;
            let nf = pts.len();
            let inp = ThetaNet::inputs(&std, pts);
            let (out, tape) = model.theta.net.forward(inp.view(), ThetaNet::CHANNELS);
            let mut adj = Array2::zeros(out.raw_dim());
            let g2 = model.gamma * model.gamma;
            let c = w.lambda2 / nf as f64;
            let mut sum = 0.0;
            let mut gamma_bar = 0.0;
            for j in 0..nf {
                let v = out[[0, j]];
                let vt = out[[0, nf + j]] * ts;
                let vx = out[[0, 2 * nf + j]] * xs;
                let vxx = out[[0, 3 * nf + j]] * xs * xs;
                let speed = model.flux.characteristic_speed_raw(v);
                let r = vt + speed * vx - g2 * vxx;
                sum += r * r;
                let rb = 2.0 * c * r;
                adj[[0, j]] = rb * model.flux.characteristic_speed_slope(v) * vx;
                adj[[0, nf + j]] = rb * ts;
                adj[[0, 2 * nf + j]] = rb * speed * xs;
                adj[[0, 3 * nf + j]] = -rb * g2 * xs * xs;
                gamma_bar -= rb * 2.0 * model.gamma * vxx;
            }
            terms.pde = c * sum;
            grad[g_idx] += gamma_bar;
            model.theta.net.backward(&tape, adj, &mut grad[r_theta.clone()]);
        }

        terms.gamma = w.lambda_gamma * model.gamma * model.gamma;
        grad[g_idx] += 2.0 * w.lambda_gamma * model.gamma;

        if self.kind == LossKind::Coupled && w.bias_l2 > 0.0 {
            terms.bias = w.bias_l2 * model.bias.iter().map(|b| b * b).sum::<f64>();
            for (g, b) in grad[r_bias].iter_mut().zip(&model.bias) {
                *g += 2.0 * w.bias_l2 * b;
            }
        }
        terms.check()?;
        Ok(terms)
    }

    fn coupled_terms(&self, model: &PinnModel, terms: &mut LossTerms, grad: &mut [f64]) -> Result<()> {
        let w = self.weights;
        let ms = self.data;
        let std = model.standardizer;
        let (ts, xs) = (std.t_scale(), std.x_scale());
        let n = model.n_agents();
        let nd = ms.n_data();
        let use_data = w.lambda1 > 0.0;
        let use_traj = w.lambda3 > 0.0;
        let use_ode = w.lambda4 > 0.0;
        if !(use_data || use_traj || use_ode) {
            return Ok(());
        }
        let ng = if use_ode { ms.collocation.ode_times.len() } else { 0 };
        let taus: Vec<f64> =
            ms.times.iter().chain(ms.collocation.ode_times.iter().take(ng)).map(|&t| std.t_to_std(t)).collect();
        let phi_out = model.phi.forward(&taus);
        let np = nd + ng;
        let mut pos_bar = Array2::<f64>::zeros((n, np));
        let mut slope_bar = Array2::<f64>::zeros((n, np));

        if use_traj {
            let c = w.lambda3 / (nd * n) as f64;
            let mut sum = 0.0;
            for k in 0..nd {
                for i in 0..n {
                    let x = std.x_from_std(phi_out.positions[[i, k]]);
                    let r = x - ms.positions[k][i];
                    sum += r * r;
                    pos_bar[[i, k]] += 2.0 * c * r / xs;
                }
            }
            terms.trajectory = c * sum;
        }

        if use_data || use_ode {
            // Θ at (t_k, Φ_i(t_k)) followed by (t_l, Φ_i(t_l)); column k·n + i
            let k0 = if use_data { 0 } else { nd };
            let cols = (np - k0) * n;
            let mut inp = Array2::zeros((2, cols));
            for k in k0..np {
                for i in 0..n {
                    let col = (k - k0) * n + i;
                    inp[[0, col]] = taus[k];
                    inp[[1, col]] = phi_out.positions[[i, k]];
                }
            }
            let (out, tape) = model.theta.net.forward(inp.view(), Channels::VALUE);
            let mut out_bar = Array2::zeros(out.raw_dim());
            if use_data {
                let c = w.lambda1 / nd as f64;
                let r_bias = model.block_range(Block::Bias);
                let mut sum = 0.0;
                for k in 0..nd {
                    for i in 0..n {
                        let e = ms.densities[k][i] - model.bias[i] - out[[0, k * n + i]];
                        sum += e * e;
                        out_bar[[0, k * n + i]] = -2.0 * c * e;
                        grad[r_bias.start + i] -= 2.0 * c * e;
                    }
                }
                terms.data = c * sum;
            }
            if use_ode {
                let c = w.lambda4 / (ng * n) as f64;
                let ratio = ts / xs;
                let mut sum = 0.0;
                for l in 0..ng {
                    for i in 0..n {
                        let col = (nd + l - k0) * n + i;
                        let vel = phi_out.slopes[[i, nd + l]] * ratio;
                        let (speed, dspeed) = model.flux.clamped_speed(out[[0, col]]);
                        let g = vel - speed;
                        sum += g * g;
                        let gb = 2.0 * c * g;
                        slope_bar[[i, nd + l]] += gb * ratio;
                        out_bar[[0, col]] -= gb * dspeed;
                    }
                }
                terms.ode = c * sum;
            }
            let r_theta = model.block_range(Block::Theta);
            let in_adj = model.theta.net.backward(&tape, out_bar, &mut grad[r_theta]);
            for k in k0..np {
                for i in 0..n {
                    pos_bar[[i, k]] += in_adj[[1, (k - k0) * n + i]];
                }
            }
        }
        let r_phi = model.block_range(Block::Phi);
        model.phi.backward(&phi_out, &pos_bar, &slope_bar, &mut grad[r_phi]);
        Ok(())
    }
}

impl Objective for PinnLoss<'_> {
    fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        let terms = self.run(params, &mut grad)?;
        Ok((terms.total(), grad))
    }
}

/// Measurement and residual loss with the measured positions as the
/// agents' locations.
pub fn loss_noiseless(model: &PinnModel, ms: &MeasurementSet, w: &LossWeights) -> Result<f64> {
    if ms.n_data() == 0 {
        return Err(Error::config("empty measurement set"));
    }
    PinnLoss::new(model, ms, *w, LossKind::Noiseless)?.terms(&model.pack()).map(|t| t.total())
}

/// Coupled loss with `Φ` positions, bias correction, trajectory fit and
/// agent-dynamics residual.
pub fn loss_coupled(model: &PinnModel, ms: &MeasurementSet, w: &LossWeights) -> Result<f64> {
    if ms.n_data() == 0 {
        return Err(Error::config("empty measurement set"));
    }
    PinnLoss::new(model, ms, *w, LossKind::Coupled)?.terms(&model.pack()).map(|t| t.total())
}

/// Minimizer of the coupled loss over `n̄_ρ` alone (the loss is quadratic
/// in the bias): `n̄_i = λ₁ Σ_k (ρ̃_i − Θ(t_k, Φ_i(t_k))) / (N_data (λ₁ + κ))`.
pub fn bias_closed_form(model: &PinnModel, ms: &MeasurementSet, w: &LossWeights) -> Vec<f64> {
    let n = model.n_agents();
    let nd = ms.n_data() as f64;
    let mut sums = vec![0.0; n];
    for (k, &t) in ms.times.iter().enumerate() {
        let (pos, _) = model.trajectories(t);
        let pts: Vec<(f64, f64)> = pos.iter().map(|&x| (t, x)).collect();
        for (i, rho) in model.densities(&pts).into_iter().enumerate() {
            sums[i] += ms.densities[k][i] - rho;
        }
    }
    let denom = nd * (w.lambda1 + w.bias_l2);
    sums.iter().map(|s| w.lambda1 * s / denom).collect()
}

/// Viscous traveling-wave solution joining `ρ_l < ρ_r` for the Greenshields
/// flux: `u = V_f(1 − 2ρ)` solves Burgers' equation with viscosity `ν`, whose
/// traveling wave is `u = s − A tanh(A(x − x₀ − s t)/(2ν))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViscousShock {
    pub flux: Greenshields,
    pub rho_left: f64,
    pub rho_right: f64,
    pub nu: f64,
    pub x0: f64,
}

impl ViscousShock {
    pub fn new(flux: Greenshields, rho_left: f64, rho_right: f64, nu: f64, x0: f64) -> Result<Self> {
        if !(rho_left < rho_right) || !(nu > 0.0) {
            return Err(Error::config("viscous shock needs ρ_l < ρ_r and ν > 0"));
        }
        Ok(Self { flux, rho_left, rho_right, nu, x0 })
    }

    /// `(s, A, k)`: shock speed, half jump in `u`, and `A/(2ν)`.
    fn constants(&self) -> (f64, f64, f64) {
        let v = self.flux.v_f;
        let ul = v * (1.0 - 2.0 * self.rho_left);
        let ur = v * (1.0 - 2.0 * self.rho_right);
        let a = 0.5 * (ul - ur);
        (0.5 * (ul + ur), a, a / (2.0 * self.nu))
    }

    pub fn speed(&self) -> f64 {
        self.constants().0
    }

    /// One-neuron tanh network reproducing the profile exactly in the
    /// coordinates of `std`.
    pub fn as_theta_net(&self, std: &Standardizer) -> Result<ThetaNet> {
        let (s, a, k) = self.constants();
        let (ts, xs) = (std.t_scale(), std.x_scale());
        let v = self.flux.v_f;
        let arch = crate::nn::Architecture::mlp(2, 1, 1, 1, crate::nn::Activation::Tanh)?;
        let mut net = DenseNetwork::zeros(arch);
        net.params = vec![
            -k * s / ts,
            k / xs,
            k * (std.x_min + 1.0 / xs - self.x0 - s / ts),
            a / (2.0 * v),
            0.5 * (1.0 - s / v),
        ];
        ThetaNet::from_network(net)
    }
}

impl DensitySurface for ViscousShock {
    fn jet(&self, t: f64, x: f64) -> ThetaJet {
        let (s, a, k) = self.constants();
        let amp = a / (2.0 * self.flux.v_f);
        let z = k * (x - self.x0 - s * t);
        let th = z.tanh();
        let sech2 = 1.0 - th * th;
        ThetaJet {
            value: 0.5 * (1.0 - s / self.flux.v_f) + amp * th,
            dt: -amp * sech2 * k * s,
            dx: amp * sech2 * k,
            dxx: -2.0 * amp * th * sech2 * k * k,
        }
    }
}
