//! Procedural cross-resolution identity benchmark.

pub mod dataset;
pub mod images;
pub mod protocol;
pub mod render;
pub mod resample;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, DataConfig, Dataset, ShiftConfig, Split,
};
pub use protocol::{build_identify, build_verify, Protocol, VerifyPair};
pub use render::Appearance;
pub use resample::{downsample, Kernel};
