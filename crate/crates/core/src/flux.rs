//! Flux functions for scalar traffic-flow conservation laws.
//!
//! A model provides the flux `f(ρ)`, its derivative (the characteristic
//! speed) and the vehicle speed law `V(ρ) = f(ρ)/ρ`. Densities are
//! normalized to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance outside `[0, 1]` accepted (and clamped) by the domain checks.
pub const DENSITY_SLACK: f64 = 1e-9;

/// Validates a density, clamping values within [`DENSITY_SLACK`] of the unit interval.
pub fn check_density(rho: f64) -> Result<f64> {
    if !(-DENSITY_SLACK..=1.0 + DENSITY_SLACK).contains(&rho) || rho.is_nan() {
        return Err(Error::Domain { quantity: "density", value: rho, range: "[0, 1]".into() });
    }
    Ok(rho.clamp(0.0, 1.0))
}

/// A concave flux with `f(0) = f(1) = 0`.
///
/// Implementors supply the unchecked formulas; the provided methods add
/// the domain checks.
pub trait ConcaveFlux: Send + Sync {
    fn free_flow_speed(&self) -> f64;

    /// `f(ρ)` without domain checks.
    fn flux_raw(&self, rho: f64) -> f64;

    /// `f'(ρ)` without domain checks. Evaluated on raw network outputs.
    fn characteristic_speed_raw(&self, rho: f64) -> f64;

    /// Derivative of the characteristic speed, `f''(ρ)`.
    fn characteristic_speed_slope(&self, rho: f64) -> f64;

    /// Density maximizing the flux.
    fn critical_density(&self) -> f64;

    fn flux(&self, rho: f64) -> Result<f64> {
        Ok(self.flux_raw(check_density(rho)?))
    }

    fn characteristic_speed(&self, rho: f64) -> Result<f64> {
        Ok(self.characteristic_speed_raw(check_density(rho)?))
    }

    /// Vehicle speed `f(ρ)/ρ`, with `V(0) = V_f`.
    fn agent_speed(&self, rho: f64) -> Result<f64> {
        let rho = check_density(rho)?;
        if rho == 0.0 {
            Ok(self.free_flow_speed())
        } else {
            Ok(self.flux_raw(rho) / rho)
        }
    }

    /// Largest characteristic speed magnitude on `[0, 1]`, used for the CFL bound.
    fn max_wave_speed(&self) -> f64 {
        self.characteristic_speed_raw(0.0).abs().max(self.characteristic_speed_raw(1.0).abs())
    }
}

/// Greenshields law `V(ρ) = V_f (1 − ρ)`, giving `f(ρ) = V_f ρ (1 − ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Greenshields {
    pub v_f: f64,
}

impl Greenshields {
    pub fn new(v_f: f64) -> Result<Self> {
        if !(v_f > 0.0 && v_f.is_finite()) {
            return Err(Error::config(format!("free-flow speed must be positive, got {v_f}")));
        }
        Ok(Self { v_f })
    }

    /// Speed law on a raw value clamped to `[0, 1]`; zero slope outside.
    pub fn clamped_speed(&self, rho: f64) -> (f64, f64) {
        if rho <= 0.0 {
            (self.v_f, 0.0)
        } else if rho >= 1.0 {
            (0.0, 0.0)
        } else {
            (self.v_f * (1.0 - rho), -self.v_f)
        }
    }
}

impl ConcaveFlux for Greenshields {
    fn free_flow_speed(&self) -> f64 {
        self.v_f
    }

    fn flux_raw(&self, rho: f64) -> f64 {
        self.v_f * rho * (1.0 - rho)
    }

    fn characteristic_speed_raw(&self, rho: f64) -> f64 {
        self.v_f * (1.0 - 2.0 * rho)
    }

    fn characteristic_speed_slope(&self, _rho: f64) -> f64 {
        -2.0 * self.v_f
    }

    fn critical_density(&self) -> f64 {
        0.5
    }

    fn agent_speed(&self, rho: f64) -> Result<f64> {
        let rho = check_density(rho)?;
        Ok(self.v_f * (1.0 - rho))
    }
}
