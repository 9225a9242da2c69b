//! Building blocks of the vigil monitoring services.
//!
//! Each station server hosts a [`collector`] engine that feeds a compacting
//! [`store`] and a predicate-driven [`subscription`] hub. Services announce
//! themselves to a lease-based [`registry`]. Link quality between overlay
//! reflectors is measured by the [`probe`] module and turned into a
//! minimum spanning tree by [`overlay`]. The [`supervisor`] restarts failed
//! targets and escalates after repeated restart failures.
//!
//! Everything in this crate is synchronous and transport-free; the wire
//! framing lives in [`proto`] and the servers live in `vigil-net`.

pub mod clock;
pub mod collector;
pub mod error;
pub mod metric;
pub mod overlay;
pub mod predicate;
pub mod probe;
pub mod proto;
pub mod registry;
pub mod signing;
pub mod store;
pub mod subscription;
pub mod supervisor;

pub use error::{Error, Result};
pub use metric::{MetricValue, SeriesKey};
pub use predicate::{Predicate, PredicateSpec};
