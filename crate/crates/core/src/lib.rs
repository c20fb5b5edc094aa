//! Reconstruction of a 2D object from 1D parallel-beam projections taken at
//! unknown angles with unknown small shifts, heavy noise and outliers.

pub mod dct;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod cluster;
pub mod phantom;
pub mod pipeline;
pub mod pose_init;
pub mod radon;
pub mod reconstruct;
pub mod simulate;

pub use error::{Error, Result};
pub use image::{detector_len, Image, PoseEstimate, Projection};
