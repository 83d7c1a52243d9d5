//! Layers, networks and their persistence.

pub mod arch;
pub mod batchnorm;
pub mod checkpoint;
pub mod functional;
pub mod margin;
pub mod network;
pub mod optim;
pub mod params;

pub use arch::Architecture;
pub use batchnorm::{AdaptRule, BnPass, BnStats, BnStore};
pub use network::Network;
pub use params::{Bound, ParamStore};
