//! Marine-snow synthesis and removal toolkit.
//!
//! - [`imagecore`]: raster type, file I/O, crops, resizing.
//! - [`degrade`]: snow compositing and noise processes.
//! - [`dataset`]: paired clean/degraded dataset building and loading.
//! - [`models`]: generator, critic, U-Net and feature networks; weight files.
//! - [`train`]: WGAN and U-Net training loops.
//! - [`restore`]: median filters and U-Net inference behind one trait.
//! - [`metrics`]: MSE, PSNR, SSIM, UIQM, UCIQE and reports.

pub mod dataset;
pub mod degrade;
pub mod error;
pub mod imagecore;
pub mod metrics;
pub mod models;
pub mod restore;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use imagecore::{Image, PixelRect};
