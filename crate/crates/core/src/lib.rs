//! Hyperspectral and multispectral image fusion by two unmixing autoencoders
//! joined by cross-attention, with learned spatial/spectral degradation operators.

pub mod baseline;
pub mod cnmf;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mixing;
pub mod network;
pub mod sim;
pub mod tensor;
pub mod trainer;

mod io;

pub use error::{Error, Result};
