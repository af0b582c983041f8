//! Layers and optimizers. Layers are name-addressed views into a [`ParamStore`].

mod fusion;
mod linear;
mod lstm;
mod optim;
mod params;

pub use fusion::{FusionBlock, FusionOutput, LAYER_NORM_EPS};
pub use linear::LinearLayer;
pub use lstm::{sequence_steps, LstmDecoder, LstmParams, LstmState};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{derive_seed, fnv1a, Initializer, ParamStore};
