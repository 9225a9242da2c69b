//! The repository service of vigil.
//!
//! A [`Repository`] finds every station in its configured groups through
//! the registries, subscribes to each with the configured predicates and
//! filters, and keeps what arrives in a store partitioned by source
//! service. Reflector stations also feed the overlay optimizer with their
//! link measurements. Everything is served over a small HTTP API, see
//! [`api`].

pub mod admin;
pub mod api;
pub mod audit;
pub mod bus;
pub mod config;
pub mod error;
pub mod links;
pub mod repository;
pub mod sourced;

pub use admin::{AdminCommand, AdminKind};
pub use config::{RepoConfig, SignedFilter};
pub use error::{RepoError, Result};
pub use repository::{Repository, RepoStats, ServiceInfo, UpstreamState};
