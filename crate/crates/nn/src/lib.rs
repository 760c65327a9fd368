//! Minimal differentiable-computation core: a tape-based reverse-mode
//! engine over dense `f64` matrices, the layers the crowd world model is
//! built from, and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, MaskMode, Var};
pub use layers::{AttnMask, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{Mat, ParamId, ParamStore};
