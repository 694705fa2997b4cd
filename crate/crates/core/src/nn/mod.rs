//! Neural-network building blocks on top of candle's CPU tensors.

pub mod flops;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use flops::{FlopReport, LayerKind, LayerRecord};
pub use layers::{Conv2d, GroupNorm, GroupedPointwise, LayerScale};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamStore};
