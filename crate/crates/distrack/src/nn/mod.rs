//! Minimal reverse-mode autodiff and the network building blocks on top:
//! parameter store, tape, layers, ADAM and the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::{Adam, StepDecay};
pub use layers::{
    sine_position_encoding, AttnOut, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
pub use params::ParamStore;
pub use tape::{ConvGeom, Gradients, Tape, Var};
