//! Traffic density reconstruction from probe vehicles.
//!
//! The pipeline simulates the LWR traffic model with a Godunov scheme,
//! drives probe vehicles through the resulting density, collects noisy
//! Lagrangian measurements, and reconstructs the density between the
//! first and last probe with two coupled physics-informed networks.

pub mod agents;
pub mod error;
pub mod flux;
pub mod godunov;
pub mod nn;
pub mod optim;
pub mod pinn;
pub mod report;
pub mod sensing;
pub mod train;

pub use agents::{advance_agents, integrate_trajectories, vehicle_count, AgentTrajectories};
pub use error::{Error, Result};
pub use flux::{ConcaveFlux, Greenshields};
pub use godunov::{simulate, DensityField, Domain, ScenarioSpec};
pub use pinn::{LossWeights, PinnModel};
pub use report::{benchmark, generalization_error, Experiment};
pub use sensing::{measure, sample_collocation, standardize, MeasurementSet, NoiseConfig, Standardizer};
pub use train::{naive_train, staged_train, StageSchedule, TrainReport};
