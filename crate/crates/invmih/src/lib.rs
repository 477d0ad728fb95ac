//! Invertible mosaic image hiding: conceal N = m x n secret images inside a
//! single cover image by invertibly downscaling them into one mosaic image
//! and hiding that mosaic with an invertible wavelet-domain network.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod iih;
pub mod iir;
pub mod image_io;
pub mod latent;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{InvMihError, Result};
