//! Architectural units built on the tensor engine: smoothing iterations, resolution
//! coarsening (plain or FAS), in-channel V-cycles and the full ResNet / MgNet / MGiaD networks.

mod config;
mod hierarchy;
mod layers;
mod network;

pub use config::{ModelConfig, SharingPolicy, Variant};
pub use hierarchy::{ladder, ChannelHierarchy};
pub use layers::{
    resolution_step, sic_cycle, smooth, ChannelTransfer, Ctx, Layer, Mode, Rung, SicCycle, SmoothStep, SmoothingBlock,
    Transition,
};
pub use network::{build_model, gcd, BasicBlock, Network, ParamMeta, Role};
