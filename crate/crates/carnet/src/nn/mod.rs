//! Neural building blocks on top of the tensor tape: dense and convolution
//! layers, batch normalization, the GRU cell, and local self-attention.
//!
//! Layers are lightweight descriptors: they own names and shapes, register
//! their parameters into a [`Params`] store, and record forward ops on a tape.
//! The same descriptor drives f32 training and f64 gradient checking.

mod attention;
mod gru;
mod init;
mod layers;

pub use attention::SelfAttention2d;
pub use gru::GruCell;
pub use init::{normal_scaled, ones, uniform_fan_in, zeros};
pub use layers::{apply_bn_update, BatchNorm2d, Conv2dLayer, Dense, BN_EPS};
