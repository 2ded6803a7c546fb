//! File formats, dataset loaders, the experiment runner and report writers
//! around `decorr-core`.

pub mod checkpoint;
pub mod config;
pub mod cifar;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod fmat;
pub mod idx;
pub mod pnm;
pub mod report;

pub use error::{FormatError, Result};
