//! Layer primitives with hand-written backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod convlstm;
pub mod optim;
pub mod params;

pub use activation::{sigmoid, Activation};
pub use conv::{ConvCache, ConvGeom};
pub use convlstm::ConvLstmLayer;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Grads, Param, ParamStore};
