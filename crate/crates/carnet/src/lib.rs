//! CARNet: a dynamic autoencoder that learns current and one-step-ahead latent
//! representations of a driving scene, together with imitation-learning and
//! DQN harnesses on a procedural lane-keeping environment.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: minimal reverse-mode autodiff over dense tensors + Adam
//! - [`nn`]: conv / batchnorm / dense / GRU / local self-attention layers
//! - [`loss`]: MS-SSIM, smooth-L1, class-weighted cross-entropy, total loss
//! - [`model`]: the CARNet encoder/decoder/GRU rollout and controller head
//! - [`env`]: procedural lane renderer, kinematic vehicle, autopilot, reward
//! - [`data`]: episode dataset generation and on-disk layout
//! - [`train`]: pretraining, joint ensemble training, imitation learning, DQN
//! - [`cli`]: operator surface (subcommands, configs, metrics, checkpoints)

pub mod ckpt;
pub mod cli;
pub mod config;
pub mod data;
pub mod env;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
