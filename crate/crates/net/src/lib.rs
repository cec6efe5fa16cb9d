//! Video network for time-lapse embryo sequences and its training loop.
//!
//! The backbone is an inflated Inception-V1 with every channel count scaled
//! by a width multiplier. Its feature map is pooled per timestep (spatial max
//! and average), read by a bidirectional LSTM, and fed to two sigmoid heads:
//! fetal heartbeat and discard.
//!
//! Everything runs in `f64` on the CPU; gradients are hand-derived.

pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod model;
pub mod train;

pub use error::{NetError, Result};
pub use model::{Network, NetworkConfig, NetworkOutput, Profile};
pub use train::{RunConfig, TrainConfig};
