//! Dense tensors, tape-based reverse-mode differentiation and the neural
//! building blocks used by the attention layers and the model.

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, Coords, GradCheckReport};
pub use params::{Bindings, ParamGrads, ParamStore};
pub use tape::{ball_attention, Gradients, SoftmaxOutput, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Real, StridedRef, Tensor};
