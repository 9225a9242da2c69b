//! Network services of vigil: the line-JSON control protocol over TCP,
//! the registry server and clients, the station server and the UDP link
//! probe agent.

pub mod config;
pub mod conn;
pub mod error;
pub mod health;
pub mod probe_agent;
pub mod registry_client;
pub mod registry_server;
pub mod station;
pub mod station_client;
pub mod stopper;

pub use config::StationConfig;
pub use error::{NetError, Result};
pub use registry_client::{EventFeed, LeaseKeeper, RegistryClient};
pub use registry_server::{RegistryServer, RegistryServerConfig};
pub use station::{Station, StationParts, StationStats};
pub use station_client::{StationClient, Subscription};
