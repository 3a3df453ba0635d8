pub mod airsim;
pub mod chanmodel;
pub mod config;
pub mod dataio;
pub mod dcsolver;
pub mod error;
pub mod fltrain;
pub mod gradcodec;
pub mod linalg;
pub mod rng;
pub mod runner;
pub mod txrx;

pub use error::{Error, Result};
