//! Minimal neural-network toolkit: tensors kernels, a tape-based autograd
//! graph, parameter storage, layers and the Adam optimiser.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, ConvTranspose2x2, GroupNorm};
pub use optim::{Adam, IterationUnit, OptimConfig};
pub use params::{ParamGroup, ParamId, ParamStore};
