//! The chapters of `book/` as modules, so `cargo test --doc` runs every
//! snippet against the current crates. mdbook cannot resolve workspace
//! dependencies on its own.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/collector.md")]
pub mod collector {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/store.md")]
pub mod store {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/registry.md")]
pub mod registry {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/subscriptions.md")]
pub mod subscriptions {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/overlay.md")]
pub mod overlay {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/supervisor.md")]
pub mod supervisor {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/repository.md")]
pub mod repository {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}
