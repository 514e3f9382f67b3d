//! Lagrangian measurements: noisy densities and positions reported by the
//! agents, collocation sampling inside the agent envelope, and the affine
//! standardization of `(t, x)` used by the networks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agents::{interpolate, AgentTrajectories};
use crate::error::{Error, Result};
use crate::godunov::{DensityField, Domain};

pub const MEASUREMENT_SCHEMA_VERSION: u32 = 1;

// Independent RNG sub-streams derived from one seed.
const STREAM_DENSITY: u64 = 1;
const STREAM_POSITION: u64 = 2;
const STREAM_COLLOCATION: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Measurement noise. `sigma_y` is the variance per unit time of the
/// Brownian position error, so an increment over `Δt` has variance
/// `sigma_y · Δt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_rho: f64,
    pub mu_rho: f64,
    pub sigma_y: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self { sigma_rho: 0.0, mu_rho: 0.0, sigma_y: 0.0, seed: 0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_rho >= 0.0 && self.sigma_y >= 0.0 && self.mu_rho.is_finite()) {
            return Err(Error::config("noise scales must be non-negative"));
        }
        Ok(())
    }
}

/// Unlabeled points where only the residuals are evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Collocation {
    /// `(t, x)` pairs inside the measured agent envelope.
    pub points: Vec<(f64, f64)>,
    /// Instants for the agent-dynamics residual.
    pub ode_times: Vec<f64>,
    /// Number of box samples drawn to obtain `points`.
    pub attempts: usize,
}

/// Everything the reconstruction sees. Densities are not clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub schema_version: u32,
    pub domain: Domain,
    pub v_f: f64,
    /// Horizon covered by the measurements.
    pub t_end: f64,
    pub times: Vec<f64>,
    /// `positions[k][i]`: noisy position `w̃_i(t_k)`.
    pub positions: Vec<Vec<f64>>,
    /// `densities[k][i]`: noisy density `ρ̃_i(t_k)`.
    pub densities: Vec<Vec<f64>>,
    pub collocation: Collocation,
    pub standardized: bool,
}

impl MeasurementSet {
    pub fn n_data(&self) -> usize {
        self.times.len()
    }

    pub fn n_agents(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    /// The measured positions `w̃` as trajectories.
    pub fn measured_trajectories(&self) -> AgentTrajectories {
        let n = self.n_agents();
        AgentTrajectories {
            times: self.times.clone(),
            positions: (0..n).map(|i| self.positions.iter().map(|p| p[i]).collect()).collect(),
            speeds: vec![Vec::new(); n],
            truncated: false,
        }
    }

    pub fn with_collocation(mut self, collocation: Collocation) -> Self {
        self.collocation = collocation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MEASUREMENT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "measurement schema {} (expected {})",
                self.schema_version, MEASUREMENT_SCHEMA_VERSION
            )));
        }
        if self.times.is_empty() || self.n_agents() == 0 {
            return Err(Error::config("empty measurement set"));
        }
        let n = self.n_agents();
        if self.positions.len() != self.times.len()
            || self.densities.len() != self.times.len()
            || self.positions.iter().chain(&self.densities).any(|r| r.len() != n)
        {
            return Err(Error::Format("inconsistent measurement dimensions".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ms: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        ms.validate()?;
        Ok(ms)
    }
}

/// Samples the agents at `n_data` evenly spaced instants and adds noise:
/// Gaussian `N(μ, σ_ρ²)` on densities and an independent Brownian walk per
/// agent on positions.
pub fn measure(
    field: &DensityField,
    traj: &AgentTrajectories,
    n_data: usize,
    noise: &NoiseConfig,
) -> Result<MeasurementSet> {
    if n_data < 2 {
        return Err(Error::config(format!("need at least 2 measurement instants, got {n_data}")));
    }
    noise.validate()?;
    let t_end = traj.t_end();
    if !(t_end > 0.0) {
        return Err(Error::config("trajectories cover no time"));
    }
    let times: Vec<f64> = (0..n_data).map(|k| t_end * k as f64 / (n_data - 1) as f64).collect();
    let n = traj.n_agents();
    let density_noise = Normal::new(noise.mu_rho, noise.sigma_rho).map_err(|e| Error::config(e.to_string()))?;
    let mut rng_rho = stream_rng(noise.seed, STREAM_DENSITY);
    let mut rng_y = stream_rng(noise.seed, STREAM_POSITION);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut walk = vec![0.0; n];
    let mut positions = Vec::with_capacity(n_data);
    let mut densities = Vec::with_capacity(n_data);
    for (k, &t) in times.iter().enumerate() {
        if k > 0 {
            let scale = (noise.sigma_y * (t - times[k - 1])).sqrt();
            for b in walk.iter_mut() {
                *b += scale * std_normal.sample(&mut rng_y);
            }
        }
        let mut pos = Vec::with_capacity(n);
        let mut rho = Vec::with_capacity(n);
        for i in 0..n {
            let y = traj.position_at(i, t);
            let clean = field.sample_density(t, y)?;
            rho.push(clean + density_noise.sample(&mut rng_rho));
            pos.push(y + walk[i]);
        }
        positions.push(pos);
        densities.push(rho);
    }
    Ok(MeasurementSet {
        schema_version: MEASUREMENT_SCHEMA_VERSION,
        domain: field.domain,
        v_f: field.v_f,
        t_end,
        times,
        positions,
        densities,
        collocation: Collocation::default(),
        standardized: false,
    })
}

/// Uniform points of `{(t, x) : y_1(t) ≤ x ≤ y_N(t)}` by rejection from the
/// bounding box, plus uniform instants for the agent residual. With a
/// single agent the points lie on its trajectory.
pub fn sample_collocation(traj: &AgentTrajectories, n_f: usize, n_g: usize, seed: u64) -> Result<Collocation> {
    if n_f == 0 || n_g == 0 {
        return Err(Error::config("collocation counts must be at least 1"));
    }
    let n = traj.n_agents();
    if n == 0 || traj.times.len() < 2 {
        return Err(Error::Geometry("need at least two trajectory samples".into()));
    }
    let first = &traj.positions[0];
    let last = &traj.positions[n - 1];
    let t0 = traj.times[0];
    let t1 = traj.t_end();
    let lo = first.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !((hi > lo || n == 1) && t1 > t0) {
        return Err(Error::Geometry("degenerate agent envelope".into()));
    }
    let mut rng = stream_rng(seed, STREAM_COLLOCATION);
    if n == 1 {
        // the envelope is a single curve
        let points = (0..n_f)
            .map(|_| {
                let t = rng.gen_range(t0..=t1);
                (t, interpolate(&traj.times, first, t))
            })
            .collect();
        let ode_times = (0..n_g).map(|_| rng.gen_range(t0..=t1)).collect();
        return Ok(Collocation { points, ode_times, attempts: n_f });
    }
    let mut points = Vec::with_capacity(n_f);
    let mut attempts = 0usize;
    let max_attempts = 100 * n_f + 1000;
    while points.len() < n_f {
        if attempts >= max_attempts {
            return Err(Error::Geometry(format!("acceptance rate below 1% ({} of {attempts})", points.len())));
        }
        attempts += 1;
        let t = rng.gen_range(t0..=t1);
        let x = rng.gen_range(lo..=hi);
        if interpolate(&traj.times, first, t) <= x && x <= interpolate(&traj.times, last, t) {
            points.push((t, x));
        }
    }
    let ode_times = (0..n_g).map(|_| rng.gen_range(t0..=t1)).collect();
    Ok(Collocation { points, ode_times, attempts })
}

/// Affine maps of `[0, T]` and `[x_min, x_max]` onto `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub t_max: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl Standardizer {
    pub fn new(domain: &Domain) -> Result<Self> {
        if !(domain.t_max > 0.0) || !(domain.length() > 0.0) {
            return Err(Error::config("degenerate domain"));
        }
        Ok(Self { t_max: domain.t_max, x_min: domain.x_min, x_max: domain.x_max })
    }

    /// `dτ/dt = 2/T`.
    pub fn t_scale(&self) -> f64 {
        2.0 / self.t_max
    }

    /// `dξ/dx = 2/L`.
    pub fn x_scale(&self) -> f64 {
        2.0 / (self.x_max - self.x_min)
    }

    pub fn t_to_std(&self, t: f64) -> f64 {
        t * self.t_scale() - 1.0
    }

    pub fn x_to_std(&self, x: f64) -> f64 {
        (x - self.x_min) * self.x_scale() - 1.0
    }

    pub fn t_from_std(&self, tau: f64) -> f64 {
        (tau + 1.0) / self.t_scale()
    }

    pub fn x_from_std(&self, xi: f64) -> f64 {
        self.x_min + (xi + 1.0) / self.x_scale()
    }
}

/// Maps times and positions of a measurement set onto `[−1, 1]`.
pub fn standardize(ms: &MeasurementSet, domain: &Domain) -> Result<(MeasurementSet, Standardizer)> {
    let s = Standardizer::new(domain)?;
    let mut out = ms.clone();
    if ms.standardized {
        return Err(Error::config("measurement set is already standardized"));
    }
    out.times.iter_mut().for_each(|t| *t = s.t_to_std(*t));
    out.positions.iter_mut().flatten().for_each(|x| *x = s.x_to_std(*x));
    out.collocation.points.iter_mut().for_each(|(t, x)| {
        *t = s.t_to_std(*t);
        *x = s.x_to_std(*x);
    });
    out.collocation.ode_times.iter_mut().for_each(|t| *t = s.t_to_std(*t));
    out.standardized = true;
    Ok((out, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::integrate_trajectories;
    use crate::godunov::{simulate, ScenarioSpec};

    fn fixture() -> (DensityField, AgentTrajectories) {
        let domain = Domain::new(0.6, 0.0, 1.0, 100).unwrap();
        let field = simulate(&ScenarioSpec::random(42, 1.0), &domain).unwrap();
        let traj = integrate_trajectories(&field, &[0.1, 0.175, 0.25, 0.325, 0.4]).unwrap();
        (field, traj)
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let (field, traj) = fixture();
        let ms = measure(&field, &traj, 50, &NoiseConfig::noiseless()).unwrap();
        for (k, &t) in ms.times.iter().enumerate() {
            for i in 0..5 {
                let y = traj.position_at(i, t);
                assert_eq!(ms.positions[k][i], y);
                assert_eq!(ms.densities[k][i], field.sample_density(t, y).unwrap());
            }
        }
        assert_eq!(ms.times[0], 0.0);
        assert_eq!(*ms.times.last().unwrap(), traj.t_end());
    }

    #[test]
    fn pure_bias() {
        let (field, traj) = fixture();
        let noise = NoiseConfig { sigma_rho: 0.0, mu_rho: 0.1, sigma_y: 0.0, seed: 1 };
        let clean = measure(&field, &traj, 20, &NoiseConfig::noiseless()).unwrap();
        let biased = measure(&field, &traj, 20, &noise).unwrap();
        for (a, b) in clean.densities.iter().flatten().zip(biased.densities.iter().flatten()) {
            assert!((b - a - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn density_noise_statistics() {
        let (field, traj) = fixture();
        let noise = NoiseConfig { sigma_rho: 0.2, mu_rho: 0.0, sigma_y: 0.0, seed: 9 };
        let clean = measure(&field, &traj, 2000, &NoiseConfig::noiseless()).unwrap();
        let noisy = measure(&field, &traj, 2000, &noise).unwrap();
        let diffs: Vec<f64> =
            noisy.densities.iter().flatten().zip(clean.densities.iter().flatten()).map(|(a, b)| a - b).collect();
        assert_eq!(diffs.len(), 10_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.19..=0.21).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn position_noise_is_a_random_walk() {
        let (field, traj) = fixture();
        let noise = NoiseConfig { sigma_rho: 0.0, mu_rho: 0.0, sigma_y: 1e-3, seed: 4 };
        let ms = measure(&field, &traj, 100, &noise).unwrap();
        assert_eq!(ms.positions[0], traj.positions_at(0.0));
        // increment variance ≈ σ_y Δt, pooled over agents and steps
        let dt = ms.times[1] - ms.times[0];
        let mut incs = Vec::new();
        for k in 1..ms.n_data() {
            for i in 0..5 {
                let e1 = ms.positions[k][i] - traj.position_at(i, ms.times[k]);
                let e0 = ms.positions[k - 1][i] - traj.position_at(i, ms.times[k - 1]);
                incs.push(e1 - e0);
            }
        }
        let var = incs.iter().map(|d| d * d).sum::<f64>() / incs.len() as f64;
        assert!((var / (1e-3 * dt) - 1.0).abs() < 0.2, "ratio {}", var / (1e-3 * dt));
    }

    #[test]
    fn noise_streams_are_independent() {
        let (field, traj) = fixture();
        let a = NoiseConfig { sigma_rho: 0.2, mu_rho: 0.0, sigma_y: 0.0, seed: 5 };
        let b = NoiseConfig { sigma_y: 3.0, ..a };
        let ma = measure(&field, &traj, 30, &a).unwrap();
        let mb = measure(&field, &traj, 30, &b).unwrap();
        assert_eq!(ma.densities, mb.densities);
        assert_ne!(ma.positions, mb.positions);
        assert_eq!(ma, measure(&field, &traj, 30, &a).unwrap());
    }

    #[test]
    fn too_few_instants_rejected() {
        let (field, traj) = fixture();
        assert!(measure(&field, &traj, 1, &NoiseConfig::noiseless()).unwrap_err().is_config());
    }

    fn parallelogram(a: f64, b: f64, v: f64, t_max: f64) -> AgentTrajectories {
        let times: Vec<f64> = (0..=10).map(|k| t_max * k as f64 / 10.0).collect();
        AgentTrajectories {
            positions: vec![times.iter().map(|t| a + v * t).collect(), times.iter().map(|t| b + v * t).collect()],
            speeds: vec![vec![v; 11]; 2],
            times,
            truncated: false,
        }
    }

    #[test]
    fn acceptance_fraction_matches_area() {
        let traj = parallelogram(0.0, 1.0, 2.0, 1.0);
        let c = sample_collocation(&traj, 20_000, 10, 3).unwrap();
        let expected = 1.0 / 3.0;
        let got = c.points.len() as f64 / c.attempts as f64;
        assert!((got / expected - 1.0).abs() < 0.02, "{got} vs {expected}");
        for &(t, x) in &c.points {
            assert!(2.0 * t <= x && x <= 1.0 + 2.0 * t);
        }
        assert!(c.ode_times.iter().all(|t| (0.0..=1.0).contains(t)));
    }

    #[test]
    fn collocation_preconditions() {
        let traj = parallelogram(0.0, 1.0, 2.0, 1.0);
        assert!(sample_collocation(&traj, 0, 10, 1).is_err());
        assert!(sample_collocation(&traj, 10, 0, 1).is_err());
        // sliver envelope: acceptance far below 1%
        let thin = parallelogram(0.0, 1e-4, 50.0, 1.0);
        assert!(matches!(sample_collocation(&thin, 100, 1, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn standardizer_maps() {
        let domain = Domain::new(4.0, -2.0, 6.0, 10).unwrap();
        let s = Standardizer::new(&domain).unwrap();
        assert_eq!(s.t_to_std(2.0), 0.0);
        assert_eq!(s.t_to_std(4.0), 1.0);
        assert_eq!(s.x_to_std(-2.0), -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..4.0);
            let x: f64 = rng.gen_range(-2.0..6.0);
            assert!((s.t_from_std(s.t_to_std(t)) - t).abs() < 1e-14);
            assert!((s.x_from_std(s.x_to_std(x)) - x).abs() < 1e-14);
        }
    }

    #[test]
    fn standardize_set() {
        let (field, traj) = fixture();
        let ms = measure(&field, &traj, 10, &NoiseConfig::noiseless()).unwrap();
        let (std_ms, s) = standardize(&ms, &field.domain).unwrap();
        assert!(std_ms.standardized);
        assert_eq!(std_ms.times[0], -1.0);
        assert!((s.x_from_std(std_ms.positions[3][2]) - ms.positions[3][2]).abs() < 1e-14);
        assert_eq!(std_ms.densities, ms.densities);
        assert!(standardize(&std_ms, &field.domain).is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let (field, traj) = fixture();
        let noise = NoiseConfig { sigma_rho: 0.2, mu_rho: 0.0, sigma_y: 1e-4, seed: 2 };
        let ms = measure(&field, &traj, 10, &noise).unwrap();
        let c = sample_collocation(&ms.measured_trajectories(), 50, 5, 1).unwrap();
        let ms = ms.with_collocation(c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ms.json");
        ms.save(&p).unwrap();
        assert_eq!(MeasurementSet::load(&p).unwrap(), ms);
    }
}
