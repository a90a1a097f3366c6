pub mod calib;
pub mod error;
pub mod fourier;
pub mod gtfuse;
pub mod harness;
pub mod refinenet;
pub mod image;
pub mod rectify;
pub mod tilecorr;

pub use error::{Error, Result};
pub use image::ImageGrid;
