//! Simulation and control for vigil.
//!
//! A scenario runs a registry, one station per farm, one station per
//! reflector and the repository inside one process on a shared scaled
//! clock. Farm nodes and reflector links are simulated by a seeded world
//! model, so two runs with the same seed collect the same values.
//!
//! ```no_run
//! use vigil_sim::{run_scenario, ScenarioConfig};
//!
//! let cfg = ScenarioConfig {
//!     duration_ms: 60_000,
//!     time_factor: 10.0,
//!     ..ScenarioConfig::default()
//! };
//! let report = run_scenario(cfg)?;
//! println!("{:.1} values/s", report.rate_per_s);
//! # Ok::<(), vigil_sim::SimError>(())
//! ```

pub mod config;
pub mod control;
pub mod error;
pub mod mesh;
pub mod modules;
pub mod scenario;
pub mod world;

pub use config::{FaultAction, FaultEvent, FarmSpec, LinkSpec, ScenarioConfig, REFERENCE_CONFIG};
pub use error::{Result, SimError};
pub use scenario::{run_scenario, Report, Scenario};
pub use world::SimWorld;
