//! Per-step feedforward networks, the Adam optimizer, the learning-rate
//! schedule and parameter checkpoints.

mod adam;
mod checkpoint;
mod schedule;
mod subnet;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use schedule::{lr_at, LrSchedule};
pub use subnet::{
    subnet_forward, BatchNormConfig, BatchNormParams, BoundSubnet, InitScheme, InputLayout, Layer, Mode,
    SubnetParams, SubnetSpec,
};
