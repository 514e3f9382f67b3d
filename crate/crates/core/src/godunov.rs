//! First-order Godunov finite-volume solver for the scalar traffic
//! conservation law, with piecewise-constant initial and boundary data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{check_density, ConcaveFlux, Greenshields};

/// CFL safety factor applied to `Δx / max|f'|`.
pub const CFL: f64 = 0.9;

/// Space-time window `[0, T] × [x_min, x_max]` discretized into `n_cells` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub t_max: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
}

impl Domain {
    pub fn new(t_max: f64, x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        let d = Self { t_max, x_min, x_max, n_cells };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::config(format!("t_max must be positive, got {}", self.t_max)));
        }
        if !(self.x_max > self.x_min && self.x_max.is_finite() && self.x_min.is_finite()) {
            return Err(Error::config(format!("empty road extent [{}, {}]", self.x_min, self.x_max)));
        }
        if self.n_cells < 2 {
            return Err(Error::config("at least two cells are required"));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn dx(&self) -> f64 {
        self.length() / self.n_cells as f64
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    /// Time step and step count satisfying the CFL bound for `model`.
    /// The step is shrunk so that an integer number of steps spans `[0, T]`.
    pub fn time_grid(&self, model: &impl ConcaveFlux) -> (f64, usize) {
        let dt_max = CFL * self.dx() / model.max_wave_speed();
        let n_steps = ((self.t_max / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        (self.t_max / n_steps as f64, n_steps)
    }

    pub fn contains_time(&self, t: f64) -> bool {
        (0.0..=self.t_max).contains(&t)
    }

    pub fn contains_position(&self, x: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x)
    }
}

/// Piecewise-constant profile over equal-width pieces, either given
/// explicitly or drawn from a seeded RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Levels(Vec<f64>),
    Random { count: usize, lo: f64, hi: f64 },
}

impl Profile {
    pub fn constant(level: f64) -> Self {
        Profile::Levels(vec![level])
    }

    fn validate(&self, what: &str) -> Result<()> {
        match self {
            Profile::Levels(levels) => {
                if levels.is_empty() {
                    return Err(Error::config(format!("{what}: no levels given")));
                }
                for &l in levels {
                    check_density(l)?;
                }
            }
            Profile::Random { count, lo, hi } => {
                if *count == 0 {
                    return Err(Error::config(format!("{what}: segment count must be ≥ 1")));
                }
                check_density(*lo)?;
                check_density(*hi)?;
                if lo > hi {
                    return Err(Error::config(format!("{what}: level range [{lo}, {hi}] is empty")));
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Profile::Levels(levels) => levels.clone(),
            Profile::Random { count, lo, hi } => {
                (0..*count).map(|_| if lo == hi { *lo } else { rng.gen_range(*lo..=*hi) }).collect()
            }
        }
    }
}

/// Scenario: initial condition across the road and upstream/downstream
/// boundary densities over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub v_f: f64,
    pub initial: Profile,
    pub inflow: Profile,
    pub outflow: Profile,
}

impl ScenarioSpec {
    /// Random piecewise-constant data: 6 initial segments and boundary
    /// densities switching every `T/4`, all levels uniform in `[0.1, 0.9]`.
    pub fn random(seed: u64, v_f: f64) -> Self {
        Self {
            seed,
            v_f,
            initial: Profile::Random { count: 6, lo: 0.1, hi: 0.9 },
            inflow: Profile::Random { count: 4, lo: 0.1, hi: 0.9 },
            outflow: Profile::Random { count: 4, lo: 0.1, hi: 0.9 },
        }
    }

    pub fn uniform(level: f64, v_f: f64) -> Self {
        Self {
            seed: 0,
            v_f,
            initial: Profile::constant(level),
            inflow: Profile::constant(level),
            outflow: Profile::constant(level),
        }
    }

    /// Riemann data: `left` on the left half of the road, `right` on the right half.
    pub fn riemann(left: f64, right: f64, v_f: f64) -> Self {
        Self {
            seed: 0,
            v_f,
            initial: Profile::Levels(vec![left, right]),
            inflow: Profile::constant(left),
            outflow: Profile::constant(right),
        }
    }

    pub fn model(&self) -> Result<Greenshields> {
        Greenshields::new(self.v_f)
    }

    pub fn resolve(&self) -> Result<ResolvedScenario> {
        self.initial.validate("initial")?;
        self.inflow.validate("inflow")?;
        self.outflow.validate("outflow")?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(ResolvedScenario {
            initial: self.initial.resolve(&mut rng),
            inflow: self.inflow.resolve(&mut rng),
            outflow: self.outflow.resolve(&mut rng),
        })
    }
}

/// Concrete levels after drawing any random profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScenario {
    pub initial: Vec<f64>,
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
}

impl ResolvedScenario {
    pub fn level_range(&self) -> (f64, f64) {
        self.initial
            .iter()
            .chain(&self.inflow)
            .chain(&self.outflow)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    fn piece(levels: &[f64], frac: f64) -> f64 {
        let k = ((frac * levels.len() as f64).floor() as usize).min(levels.len() - 1);
        levels[k]
    }

    pub fn initial_at(&self, domain: &Domain, x: f64) -> f64 {
        Self::piece(&self.initial, (x - domain.x_min) / domain.length())
    }

    pub fn boundary_at(&self, domain: &Domain, t: f64) -> (f64, f64) {
        let frac = t / domain.t_max;
        (Self::piece(&self.inflow, frac), Self::piece(&self.outflow, frac))
    }
}

/// Godunov flux `min(demand(ρ_l), supply(ρ_r))`.
pub fn godunov_numerical_flux(model: &impl ConcaveFlux, left: f64, right: f64) -> Result<f64> {
    let left = check_density(left)?;
    let right = check_density(right)?;
    Ok(numerical_flux_unchecked(model, left, right))
}

fn numerical_flux_unchecked(model: &impl ConcaveFlux, left: f64, right: f64) -> f64 {
    let crit = model.critical_density();
    let demand = model.flux_raw(left.min(crit));
    let supply = model.flux_raw(right.max(crit));
    demand.min(supply)
}

/// Result of one conservative update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub row: Vec<f64>,
    pub inflow_flux: f64,
    pub outflow_flux: f64,
}

/// One conservative update `ρ_i ← ρ_i − (Δt/Δx)(F_{i+1/2} − F_{i−1/2})` with
/// ghost cells holding the boundary densities.
pub fn step(
    model: &impl ConcaveFlux,
    row: &[f64],
    dt: f64,
    dx: f64,
    boundary_in: f64,
    boundary_out: f64,
) -> Result<StepOutput> {
    let dt_max = CFL * dx / model.max_wave_speed();
    if !(dt > 0.0) || dt > dt_max * (1.0 + 1e-12) {
        return Err(Error::config(format!("time step {dt} violates the CFL bound {dt_max}")));
    }
    if row.is_empty() {
        return Err(Error::config("empty row"));
    }
    let boundary_in = check_density(boundary_in)?;
    let boundary_out = check_density(boundary_out)?;
    let n = row.len();
    let mut fluxes = Vec::with_capacity(n + 1);
    fluxes.push(numerical_flux_unchecked(model, boundary_in, row[0]));
    for w in row.windows(2) {
        fluxes.push(numerical_flux_unchecked(model, w[0], w[1]));
    }
    fluxes.push(numerical_flux_unchecked(model, row[n - 1], boundary_out));
    let ratio = dt / dx;
    let next =
        row.iter().zip(fluxes.windows(2)).map(|(&rho, f)| (rho - ratio * (f[1] - f[0])).clamp(0.0, 1.0)).collect();
    Ok(StepOutput { row: next, inflow_flux: fluxes[0], outflow_flux: fluxes[n] })
}

/// Space-time grid of cell averages produced by [`simulate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub domain: Domain,
    pub v_f: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Row-major `(n_steps + 1) × n_cells`.
    values: Vec<f64>,
    /// Boundary fluxes applied during step `n → n+1`.
    pub inflow_flux: Vec<f64>,
    pub outflow_flux: Vec<f64>,
}

impl DensityField {
    /// Builds a field from raw rows, e.g. for analytic fixtures.
    pub fn from_rows(domain: Domain, v_f: f64, dt: f64, rows: Vec<Vec<f64>>) -> Result<Self> {
        domain.validate()?;
        if rows.is_empty() || rows.iter().any(|r| r.len() != domain.n_cells) {
            return Err(Error::config("row length does not match cell count"));
        }
        let n_steps = rows.len() - 1;
        Ok(Self {
            domain,
            v_f,
            dt,
            n_steps,
            values: rows.into_iter().flatten().collect(),
            inflow_flux: vec![0.0; n_steps],
            outflow_flux: vec![0.0; n_steps],
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_steps + 1
    }

    pub fn n_cells(&self) -> usize {
        self.domain.n_cells
    }

    pub fn dx(&self) -> f64 {
        self.domain.dx()
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let c = self.domain.n_cells;
        &self.values[n * c..(n + 1) * c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Σ ρ Δx` at row `n`.
    pub fn mass(&self, n: usize) -> f64 {
        self.row(n).iter().sum::<f64>() * self.dx()
    }

    /// Row index holding the state at time `t` (nearest row at or below `t`).
    pub fn row_index(&self, t: f64) -> Result<usize> {
        if !(t >= -1e-12 && t <= self.domain.t_max * (1.0 + 1e-12)) {
            return Err(Error::Domain { quantity: "time", value: t, range: format!("[0, {}]", self.domain.t_max) });
        }
        let n = ((t / self.dt) + 1e-9).floor().max(0.0) as usize;
        Ok(n.min(self.n_steps))
    }

    /// Cell containing `x`; interfaces belong to the cell on their right.
    pub fn cell_index(&self, x: f64) -> Result<usize> {
        let d = &self.domain;
        if !d.contains_position(x) {
            return Err(Error::Domain { quantity: "position", value: x, range: format!("[{}, {}]", d.x_min, d.x_max) });
        }
        let i = ((x - d.x_min) / d.dx()).floor() as usize;
        Ok(i.min(d.n_cells - 1))
    }

    /// Right limit `ρ(t, x⁺)` of the piecewise-constant solution, without
    /// interpolation in time.
    pub fn sample_density(&self, t: f64, x: f64) -> Result<f64> {
        let n = self.row_index(t)?;
        let i = self.cell_index(x)?;
        Ok(self.row(n)[i])
    }

    /// CSV grid: header row holds the time stamps, first column the cell centers.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "x\\t")?;
        for n in 0..self.n_rows() {
            write!(w, ",{:e}", self.time(n))?;
        }
        writeln!(w)?;
        for i in 0..self.n_cells() {
            write!(w, "{:e}", self.domain.cell_center(i))?;
            for n in 0..self.n_rows() {
                write!(w, ",{:e}", self.row(n)[i])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::decode(&mut r)
    }

    /// Binary layout, all little-endian: magic `TRDF`, `u32` version,
    /// `u64` rows, `u64` cells, `f64` t_max, x_min, x_max, v_f, dt, then the
    /// row-major grid, then the inflow and outflow flux ledgers.
    pub fn encode(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&FIELD_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_rows() as u64).to_le_bytes())?;
        w.write_all(&(self.n_cells() as u64).to_le_bytes())?;
        for v in [self.domain.t_max, self.domain.x_min, self.domain.x_max, self.v_f, self.dt] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.values.iter().chain(&self.inflow_flux).chain(&self.outflow_flux) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FIELD_MAGIC {
            return Err(Error::Format("not a density field file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FIELD_VERSION {
            return Err(Error::Format(format!("unsupported field version {version}")));
        }
        let n_rows = read_u64(r)? as usize;
        let n_cells = read_u64(r)? as usize;
        if n_rows == 0 {
            return Err(Error::Format("field has no rows".into()));
        }
        let t_max = read_f64(r)?;
        let x_min = read_f64(r)?;
        let x_max = read_f64(r)?;
        let v_f = read_f64(r)?;
        let dt = read_f64(r)?;
        let domain = Domain::new(t_max, x_min, x_max, n_cells)?;
        let values = read_f64s(r, n_rows * n_cells)?;
        let inflow_flux = read_f64s(r, n_rows - 1)?;
        let outflow_flux = read_f64s(r, n_rows - 1)?;
        Ok(Self { domain, v_f, dt, n_steps: n_rows - 1, values, inflow_flux, outflow_flux })
    }

    /// Parses the CSV written by [`DensityField::write_csv`] back into rows
    /// (`result[n][i]`) and the time/position axes.
    pub fn read_csv_grid(path: impl AsRef<Path>) -> Result<CsvGrid> {
        read_csv_grid(path)
    }
}

const FIELD_MAGIC: &[u8; 4] = b"TRDF";
const FIELD_VERSION: u32 = 1;

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

/// Grid read back from one of the CSV exports: `rows` holds one time per
/// column of the file, `values[n][i]` is the value at time `n`, position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvGrid {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

pub(crate) fn read_csv_grid(path: impl AsRef<Path>) -> Result<CsvGrid> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))??;
    let times = parse_floats(header.split(',').skip(1))?;
    let mut positions = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_floats(line.split(','))?;
        if vals.len() != times.len() + 1 {
            return Err(Error::Format("ragged csv row".into()));
        }
        positions.push(vals[0]);
        columns.push(vals[1..].to_vec());
    }
    let values = (0..times.len()).map(|n| columns.iter().map(|c| c[n]).collect()).collect();
    Ok(CsvGrid { times, positions, values })
}

fn parse_floats<'a>(it: impl Iterator<Item = &'a str>) -> Result<Vec<f64>> {
    it.map(|s| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))).collect()
}

/// Runs the Godunov scheme over the whole domain.
pub fn simulate(spec: &ScenarioSpec, domain: &Domain) -> Result<DensityField> {
    domain.validate()?;
    let model = spec.model()?;
    let scenario = spec.resolve()?;
    let (dt, n_steps) = domain.time_grid(&model);
    let dx = domain.dx();
    let n_cells = domain.n_cells;
    let mut values = Vec::with_capacity((n_steps + 1) * n_cells);
    let mut row: Vec<f64> = (0..n_cells).map(|i| scenario.initial_at(domain, domain.cell_center(i))).collect();
    values.extend_from_slice(&row);
    let mut inflow_flux = Vec::with_capacity(n_steps);
    let mut outflow_flux = Vec::with_capacity(n_steps);
    for n in 0..n_steps {
        // boundary data sampled at the start of the step
        let (b_in, b_out) = scenario.boundary_at(domain, n as f64 * dt);
        let out = step(&model, &row, dt, dx, b_in, b_out)?;
        inflow_flux.push(out.inflow_flux);
        outflow_flux.push(out.outflow_flux);
        row = out.row;
        values.extend_from_slice(&row);
    }
    Ok(DensityField { domain: *domain, v_f: spec.v_f, dt, n_steps, values, inflow_flux, outflow_flux })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Greenshields {
        Greenshields::new(1.0).unwrap()
    }

    #[test]
    fn numerical_flux_examples() {
        let m = unit();
        assert_eq!(godunov_numerical_flux(&m, 0.0, 0.0).unwrap(), 0.0);
        assert!((godunov_numerical_flux(&m, 0.2, 0.8).unwrap() - 0.16).abs() < 1e-15);
        assert_eq!(godunov_numerical_flux(&m, 0.8, 0.2).unwrap(), 0.25);
        assert!(godunov_numerical_flux(&m, 1.5, 0.2).is_err());
    }

    /// Exact Riemann solution sampled along `x/t = 0`, used as an oracle
    /// for the numerical flux.
    fn exact_interface_flux(m: &Greenshields, l: f64, r: f64) -> f64 {
        if l <= r {
            // shock with Rankine–Hugoniot speed
            let s = if (r - l).abs() < 1e-14 {
                m.characteristic_speed_raw(l)
            } else {
                (m.flux_raw(r) - m.flux_raw(l)) / (r - l)
            };
            if s >= 0.0 {
                m.flux_raw(l)
            } else {
                m.flux_raw(r)
            }
        } else {
            // rarefaction: ρ(ξ) = (1 − ξ/V_f)/2 between the edge speeds
            let (fl, fr) = (m.characteristic_speed_raw(l), m.characteristic_speed_raw(r));
            if fl >= 0.0 {
                m.flux_raw(l)
            } else if fr <= 0.0 {
                m.flux_raw(r)
            } else {
                m.flux_raw(0.5)
            }
        }
    }

    #[test]
    fn numerical_flux_matches_exact_riemann_solver() {
        let m = Greenshields::new(1.7).unwrap();
        for a in 0..=20 {
            for b in 0..=20 {
                let (l, r) = (a as f64 / 20.0, b as f64 / 20.0);
                let g = godunov_numerical_flux(&m, l, r).unwrap();
                let e = exact_interface_flux(&m, l, r);
                assert!((g - e).abs() < 1e-12, "({l}, {r}): {g} vs {e}");
            }
        }
    }

    #[test]
    fn uniform_row_is_fixed_point() {
        let m = unit();
        let row = vec![0.37; 20];
        let out = step(&m, &row, 0.009, 0.01, 0.37, 0.37).unwrap();
        for v in &out.row {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn cfl_violation_is_config_error() {
        let m = unit();
        let err = step(&m, &[0.5; 4], 0.02, 0.01, 0.5, 0.5).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn stationary_shock_stays_put() {
        let domain = Domain::new(5.0, -1.0, 1.0, 100).unwrap();
        let field = simulate(&ScenarioSpec::riemann(0.2, 0.8, 1.0), &domain).unwrap();
        let last = field.row(field.n_steps);
        for (i, v) in last.iter().enumerate() {
            let want = if i < 50 { 0.2 } else { 0.8 };
            assert!((v - want).abs() < 1e-12, "cell {i}: {v}");
        }
    }

    #[test]
    fn uniform_scenario_stays_uniform() {
        let domain = Domain::new(1.0, 0.0, 1.0, 50).unwrap();
        let field = simulate(&ScenarioSpec::uniform(0.3, 1.0), &domain).unwrap();
        assert!(field.values().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn simulation_is_deterministic() {
        let domain = Domain::new(1.0, 0.0, 1.0, 100).unwrap();
        let spec = ScenarioSpec::random(7, 1.0);
        let a = simulate(&spec, &domain).unwrap();
        let b = simulate(&spec, &domain).unwrap();
        assert_eq!(a, b);
        let c = simulate(&ScenarioSpec::random(8, 1.0), &domain).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn sampling_conventions() {
        let domain = Domain::new(1.0, 0.0, 1.0, 2).unwrap();
        let field =
            DensityField::from_rows(domain, 1.0, 0.5, vec![vec![0.2, 0.8], vec![0.3, 0.7], vec![0.4, 0.6]]).unwrap();
        // interface at x = 0.5 belongs to the right cell
        assert_eq!(field.sample_density(0.0, 0.5).unwrap(), 0.8);
        assert_eq!(field.sample_density(0.0, 0.49).unwrap(), 0.2);
        // between rows: lower row
        assert_eq!(field.sample_density(0.74, 0.1).unwrap(), 0.3);
        assert_eq!(field.sample_density(1.0, 1.0).unwrap(), 0.6);
        assert!(field.sample_density(1.5, 0.1).is_err());
        assert!(field.sample_density(0.5, -0.1).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let domain = Domain::new(1.0, 0.0, 1.0, 30).unwrap();
        let field = simulate(&ScenarioSpec::random(3, 1.0), &domain).unwrap();
        let mut buf = Vec::new();
        field.encode(&mut buf).unwrap();
        let back = DensityField::decode(&mut buf.as_slice()).unwrap();
        assert_eq!(field, back);
        assert!(DensityField::decode(&mut &b"XXXX"[..]).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.csv");
        let domain = Domain::new(0.5, 0.0, 1.0, 10).unwrap();
        let field = simulate(&ScenarioSpec::random(3, 1.0), &domain).unwrap();
        field.write_csv(&path).unwrap();
        let grid = read_csv_grid(&path).unwrap();
        assert_eq!(grid.times.len(), field.n_rows());
        assert_eq!(grid.positions.len(), field.n_cells());
        for n in 0..field.n_rows() {
            assert_eq!(grid.values[n], field.row(n));
        }
    }

    #[test]
    fn invalid_profiles_rejected() {
        let domain = Domain::new(1.0, 0.0, 1.0, 10).unwrap();
        let mut spec = ScenarioSpec::uniform(0.3, 1.0);
        spec.initial = Profile::Levels(vec![1.4]);
        assert!(simulate(&spec, &domain).is_err());
        spec.initial = Profile::Random { count: 0, lo: 0.1, hi: 0.2 };
        assert!(simulate(&spec, &domain).is_err());
        assert!(Domain::new(0.0, 0.0, 1.0, 10).is_err());
        assert!(Domain::new(1.0, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn scenario_json_roundtrip() {
        let spec = ScenarioSpec::random(11, 1.0);
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioSpec>(&s).unwrap(), spec);
    }
}
