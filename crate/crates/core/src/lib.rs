//! Robust feature knowledge distillation for lightweight crack segmentation.
//!
//! The crate covers the whole study loop: dataset ingestion and synthesis,
//! image corruptions, the PCT student / PoolingCrack teacher / UNet-ResNet18
//! networks, distillation objectives, training, and evaluation reports.

pub mod corruption;
pub mod data;
pub mod distill;
pub mod draw;
pub mod engine;
pub mod error;
pub mod eval;
pub mod image;
pub mod models;
pub mod nn;

pub use error::{Error, Result};
