//! Multigrid-in-all-dimensions convolutional networks.
//!
//! - [`tensor`]: dense tensors, grouped convolutions, batch norm and a reverse-mode tape.
//! - [`blocks`]: smoothing iterations, in-channel V-cycles, FAS resolution coarsening and full networks.
//! - [`complexity`]: closed-form weight counts and channel-scaling fits.
//! - [`oracle`]: linear geometric multigrid on Poisson problems, and its comparison with [`blocks`] in linear mode.
//! - [`data`]: IDX / CIFAR binary loaders, synthetic data and batching.
//! - [`train`]: SGD, schedules, the training loop and checkpoints.
//! - [`config`]: the TOML run configuration.
//! - [`verify`]: gradient, matrix, sharing and hierarchy self-checks.

pub mod blocks;
pub mod complexity;
pub mod config;
pub mod data;
pub mod error;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
