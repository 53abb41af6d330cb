pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck_suite;
pub mod modality;
pub mod network;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use modality::{Modality, Region};
pub use network::{NetworkConfig, SegNetwork};
