//! The hierarchical encoder/decoder: message-passing embedding, ball
//! attention blocks, coarsening with wider features and refinement with
//! additive skip connections.

pub mod config;
pub mod layers;
pub mod network;

pub use config::{ErwinConfig, MAX_MPNN_DIM};
pub use layers::{
    coarsen, erwin_block, mpnn_step, refine, BlockParams, EdgeList, LevelGeometry, LevelState, MpnnStepParams,
};
pub use network::{rotated_slot_map, Erwin, ForwardOptions, ForwardOutput, Neighborhood, Prepared, StageGeometry};
