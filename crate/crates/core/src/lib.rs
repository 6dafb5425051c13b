//! Cloud segmentation of 4-band (R, G, B, NIR) satellite imagery.
//!
//! The crate is organised bottom-up:
//!
//! * [`raster`] reads and writes MSR1 scene files and cuts normalised patches.
//! * [`tensor`] holds the dense NCHW tensor, its forward/backward kernels, a small
//!   reverse-mode tape and a finite-difference gradient checker.
//! * [`net`] assembles CONV / IRU / ASC / ASPP blocks into the encoder-decoder
//!   network from a declarative architecture config.
//! * [`train`] covers augmentation, splitting, the loss, Adam and the epoch loop.
//! * [`segment`] runs sliding-window inference over whole scenes with max-merge.
//! * [`metrics`] tallies confusion matrices and renders report rows.
//! * [`synth`] procedurally generates scenes with ground-truth cloud masks.

pub mod error;
pub mod metrics;
pub mod net;
pub mod raster;
pub mod segment;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
