//! Parallel MRI reconstruction from undersampled multichannel k-space:
//! GRAPPA, AC-LORAKS, RAKI and the unrolled LORAKI network.

pub mod error;
pub mod experiment;
pub mod fft;
pub mod grappa;
pub mod grid;
pub mod io;
pub mod kspace;
pub mod loraki;
pub mod loraks;
pub mod metrics;
pub mod neuralk;
pub mod phantom;
pub mod raki;
pub mod sampling;
pub mod scalar;
pub mod support;

pub use error::{Error, Result};
pub use grid::{ChannelGrid, KSpace, MagnitudeImage, RealChannelStack};
pub use sampling::{AcsRegion, LocalConfigSet, SamplingMask};
pub use scalar::Real;
pub use support::{KernelSupport, Offset, SupportShape};

pub type KSpace64 = KSpace<f64>;
pub type KSpace32 = KSpace<f32>;
pub type RealChannelStack64 = RealChannelStack<f64>;
pub type RealChannelStack32 = RealChannelStack<f32>;
pub type MagnitudeImage64 = MagnitudeImage<f64>;
