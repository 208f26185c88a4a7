//! Reverse-mode autodiff, layers, and the optimizer.

pub mod check;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use nn::{gcn_propagate, Activation, BiGru, GcnLayer, GruCell, Linear, Mlp};
pub use params::{Adam, Param, ParamId, ParamStore};
pub use rng::{FixedNoise, NoiseSource, RngStream};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
