//! Benchmarks, receptive-field probes and synthetic training built on
//! `erwin-core`.
//!
//! - [`bench`]: batch benchmarks in wall-clock or abstract-cost units.
//! - [`fit`]: power-law fits of runtime against problem size.
//! - [`gradsuite`]: finite-difference checks of every operation and layer.
//! - [`probe`]: receptive fields from gradients and from perturbations.
//! - [`train`]: Adam on small synthetic regression tasks.
//! - [`presets`]: built-in model configurations.

pub mod bench;
pub mod error;
pub mod fit;
pub mod gradsuite;
pub mod presets;
pub mod probe;
pub mod train;

pub use error::{HarnessError, Result};
