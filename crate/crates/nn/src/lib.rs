//! Reverse-mode automatic differentiation with the small set of layers the
//! comix agents need: dense layers, GRU and bidirectional GRU cells, layer
//! normalization, an RMSprop optimizer and a binary checkpoint format.
//!
//! Everything runs in double precision on row-major matrices.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use error::NnError;
pub use graph::{argmax, sigmoid, Gradients, Graph, Matrix, Var, Weights};
pub use layers::{Activation, BiGru, Gru, LayerKind, LayerNorm, LayerSpec, Linear, Mlp};
pub use optim::RmsProp;
pub use params::{ParamId, ParamStore};
