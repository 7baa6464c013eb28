//! RIFT: unsupervised many-to-many image translation that infers shared vs.
//! domain-specific attributes from data by restricting information flow
//! through the network, together with a toy shapes dataset, the full metric
//! suite, and runnable ablation diagnostics.

pub mod capacity;
pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod nn;
pub mod report;
pub mod trainer;

pub use error::RiftError;

pub type Result<T> = std::result::Result<T, RiftError>;
