//! Ball-tree partitioning and linear-time ball attention for point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: point clouds, synthetic generators and CSV ingestion.
//! - [`balltree`]: perfect ball trees with contiguous leaf storage, rotated
//!   trees for cross-ball connections and k-nearest-neighbour search.
//! - [`numerics`]: a small dense tensor with tape-based reverse-mode
//!   differentiation plus the neural primitives used by the model.
//! - [`attention`]: ball-restricted multi-head self-attention with relative
//!   position embedding, distance bias and virtual-slot masking.
//! - [`model`]: message-passing embedding, coarsening/refinement and the
//!   UNet-style encoder/decoder.
//! - [`reference`]: slow, direct implementations used as test oracles.

pub mod attention;
pub mod balltree;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod reference;

pub use error::{Error, Result};
