pub mod autodiff;
pub mod correction;
pub mod data;
pub mod distortion;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod slicing;
pub mod train;

pub use error::{Error, Result};
