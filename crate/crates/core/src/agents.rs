//! Probe vehicles driven by the density field: `ẏ_i = V(ρ(t, y_i⁺))`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{ConcaveFlux, Greenshields};
use crate::godunov::DensityField;

/// Ordered agent paths sampled on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectories {
    pub times: Vec<f64>,
    /// `positions[i][n]` is agent `i` at `times[n]`.
    pub positions: Vec<Vec<f64>>,
    /// Speed used over the step starting at `times[n]`.
    pub speeds: Vec<Vec<f64>>,
    /// Set when integration stopped early because an agent left the road.
    pub truncated: bool,
}

impl AgentTrajectories {
    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Linear interpolation of agent `i` at time `t` (exact for the
    /// piecewise-linear Euler path).
    pub fn position_at(&self, i: usize, t: f64) -> f64 {
        interpolate(&self.times, &self.positions[i], t)
    }

    pub fn positions_at(&self, t: f64) -> Vec<f64> {
        (0..self.n_agents()).map(|i| self.position_at(i, t)).collect()
    }

    /// Resamples every path at `times`.
    pub fn subsample(&self, times: &[f64]) -> AgentTrajectories {
        let positions = (0..self.n_agents()).map(|i| times.iter().map(|&t| self.position_at(i, t)).collect()).collect();
        let speeds = (0..self.n_agents())
            .map(|i| times.iter().map(|&t| interpolate_step(&self.times, &self.speeds[i], t)).collect())
            .collect();
        AgentTrajectories { times: times.to_vec(), positions, speeds, truncated: self.truncated }
    }

    /// CSV with columns `t, y_1, …, y_N`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "t")?;
        for i in 0..self.n_agents() {
            write!(w, ",y_{}", i + 1)?;
        }
        writeln!(w)?;
        for (n, t) in self.times.iter().enumerate() {
            write!(w, "{t:e}")?;
            for p in &self.positions {
                write!(w, ",{:e}", p[n])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= times[0] {
        return values[0];
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return values[last];
    }
    let k = times.partition_point(|&s| s <= t) - 1;
    let w = (t - times[k]) / (times[k + 1] - times[k]);
    values[k] + w * (values[k + 1] - values[k])
}

fn interpolate_step(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s <= t + 1e-12).max(1) - 1;
    values[k.min(values.len() - 1)]
}

/// Positions after one step, or a flag that an agent left the road.
#[derive(Debug, Clone, PartialEq)]
pub enum Advance {
    Moved { positions: Vec<f64>, speeds: Vec<f64> },
    Exited { agent: usize },
}

fn check_ordered(positions: &[f64]) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::config("no agents"));
    }
    if positions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("agent positions must be strictly increasing"));
    }
    Ok(())
}

/// Explicit Euler step of every agent using the right-limit density at
/// the current time.
pub fn advance_agents(field: &DensityField, t: f64, positions: &[f64], dt: f64) -> Result<Advance> {
    check_ordered(positions)?;
    let model = Greenshields::new(field.v_f)?;
    let mut speeds = Vec::with_capacity(positions.len());
    for &y in positions {
        let rho = field.sample_density(t, y)?;
        speeds.push(model.agent_speed(rho)?);
    }
    let mut next: Vec<f64> = positions.iter().zip(&speeds).map(|(y, v)| y + dt * v).collect();
    if let Some(agent) = next.iter().position(|&y| !field.domain.contains_position(y)) {
        return Ok(Advance::Exited { agent });
    }
    // no overtaking: pull the trailing agent back behind its leader
    let nudge = 1e-9 * field.dx();
    for i in (0..next.len().saturating_sub(1)).rev() {
        if next[i] >= next[i + 1] {
            next[i] = next[i + 1] - nudge;
        }
    }
    Ok(Advance::Moved { positions: next, speeds })
}

/// Integrates the agents at the solver step over the whole horizon.
pub fn integrate_trajectories(field: &DensityField, y0: &[f64]) -> Result<AgentTrajectories> {
    check_ordered(y0)?;
    for &y in y0 {
        field.cell_index(y)?;
    }
    let n_agents = y0.len();
    let mut times = vec![0.0];
    let mut positions: Vec<Vec<f64>> = y0.iter().map(|&y| vec![y]).collect();
    let mut speeds: Vec<Vec<f64>> = vec![Vec::new(); n_agents];
    let mut current = y0.to_vec();
    let mut truncated = false;
    for n in 0..field.n_steps {
        let t = field.time(n);
        match advance_agents(field, t, &current, field.dt)? {
            Advance::Moved { positions: next, speeds: v } => {
                for i in 0..n_agents {
                    positions[i].push(next[i]);
                    speeds[i].push(v[i]);
                }
                times.push(field.time(n + 1));
                current = next;
            }
            Advance::Exited { .. } => {
                truncated = true;
                break;
            }
        }
    }
    // speed at the final instant, for a complete series
    let t_last = *times.last().unwrap();
    let model = Greenshields::new(field.v_f)?;
    for i in 0..n_agents {
        let rho = field.sample_density(t_last, current[i])?;
        speeds[i].push(model.agent_speed(rho)?);
    }
    Ok(AgentTrajectories { times, positions, speeds, truncated })
}

/// `∫_a^b ρ(t, x) dx` over the piecewise-constant row at `t`.
pub fn vehicle_count(field: &DensityField, t: f64, a: f64, b: f64) -> Result<f64> {
    if a > b {
        return Err(Error::Domain { quantity: "interval start", value: a, range: format!("(-inf, {b}]") });
    }
    let n = field.row_index(t)?;
    let ia = field.cell_index(a)?;
    let ib = field.cell_index(b)?;
    if a == b {
        return Ok(0.0);
    }
    let row = field.row(n);
    let d = &field.domain;
    let dx = d.dx();
    let edge = |i: usize| d.x_min + i as f64 * dx;
    if ia == ib {
        return Ok(row[ia] * (b - a));
    }
    let mut total = row[ia] * (edge(ia + 1) - a);
    total += row[ia + 1..ib].iter().sum::<f64>() * dx;
    total += row[ib] * (b - edge(ib));
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::godunov::{simulate, Domain, ScenarioSpec};

    fn uniform_field(level: f64, t_max: f64) -> DensityField {
        let domain = Domain::new(t_max, 0.0, 10.0, 100).unwrap();
        simulate(&ScenarioSpec::uniform(level, 1.0), &domain).unwrap()
    }

    fn moved(a: Advance) -> Vec<f64> {
        match a {
            Advance::Moved { positions, .. } => positions,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn advance_examples() {
        let free = uniform_field(0.0, 1.0);
        let next = moved(advance_agents(&free, 0.0, &[1.0, 2.0], 0.1).unwrap());
        assert!((next[0] - 1.1).abs() < 1e-14 && (next[1] - 2.1).abs() < 1e-14);
        let jam = uniform_field(1.0, 1.0);
        assert_eq!(moved(advance_agents(&jam, 0.0, &[1.0, 2.0], 0.1).unwrap()), vec![1.0, 2.0]);
        let half = uniform_field(0.5, 1.0);
        let next = moved(advance_agents(&half, 0.0, &[1.0, 2.0], 0.2).unwrap());
        assert!((next[0] - 1.1).abs() < 1e-14 && (next[1] - 2.1).abs() < 1e-14);
    }

    #[test]
    fn unordered_input_rejected() {
        let f = uniform_field(0.5, 1.0);
        assert!(advance_agents(&f, 0.0, &[2.0, 1.0], 0.1).is_err());
        assert!(advance_agents(&f, 0.0, &[1.0, 1.0], 0.1).is_err());
    }

    #[test]
    fn exit_is_flagged() {
        let f = uniform_field(0.0, 1.0);
        assert_eq!(advance_agents(&f, 0.0, &[1.0, 9.95], 0.1).unwrap(), Advance::Exited { agent: 1 });
        let traj = integrate_trajectories(&f, &[1.0, 9.5]).unwrap();
        assert!(traj.truncated);
        assert!(traj.t_end() < 1.0);
    }

    #[test]
    fn uniform_field_gives_straight_lines() {
        let f = uniform_field(0.3, 2.0);
        let traj = integrate_trajectories(&f, &[1.0, 1.5, 3.0]).unwrap();
        assert!(!traj.truncated);
        for (n, &t) in traj.times.iter().enumerate() {
            for (i, y0) in [1.0, 1.5, 3.0].iter().enumerate() {
                assert!((traj.positions[i][n] - (y0 + 0.7 * t)).abs() < 1e-12);
            }
            assert!((traj.positions[1][n] - traj.positions[0][n] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn agent_slows_across_stationary_shock() {
        let domain = Domain::new(4.0, -1.0, 1.0, 100).unwrap();
        let field = simulate(&ScenarioSpec::riemann(0.2, 0.8, 1.0), &domain).unwrap();
        let traj = integrate_trajectories(&field, &[-0.5]).unwrap();
        let s = &traj.speeds[0];
        assert!((s[0] - 0.8).abs() < 1e-12);
        assert!((s[s.len() - 1] - 0.2).abs() < 1e-12);
        assert!(traj.positions[0].last().unwrap() > &0.0);
    }

    #[test]
    fn vehicle_count_examples() {
        let f = uniform_field(0.5, 1.0);
        assert!((vehicle_count(&f, 0.3, 0.0, 10.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(vehicle_count(&f, 0.3, 4.2, 4.2).unwrap(), 0.0);
        assert!((vehicle_count(&f, 0.3, 0.05, 0.07).unwrap() - 0.01).abs() < 1e-14);
        assert!((vehicle_count(&f, 0.3, 0.05, 3.33).unwrap() - 0.5 * 3.28).abs() < 1e-12);
        assert!(vehicle_count(&f, 0.3, 3.0, 2.0).is_err());
    }

    #[test]
    fn subsample_interpolates() {
        let f = uniform_field(0.0, 1.0);
        let traj = integrate_trajectories(&f, &[1.0]).unwrap();
        let s = traj.subsample(&[0.0, 0.333, 1.0]);
        assert!((s.positions[0][1] - 1.333).abs() < 1e-12);
        assert!((s.positions[0][2] - 2.0).abs() < 1e-12);
    }
}
