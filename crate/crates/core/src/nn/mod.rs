//! Minimal neural-network toolkit: an autodiff tape, parameter storage,
//! dense layers and the AdamW optimizer.

pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{Activation, Dense, LayerNorm, Mlp, MlpStyle};
pub use params::{AdamW, ParamId, Params, TensorRecord};
pub use tape::{Gradients, Mat, Segments, Tape, Var};
