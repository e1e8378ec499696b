//! Annotation-free transparent liquid segmentation.
//!
//! Colored-liquid images are labelled automatically by background
//! subtraction, translated into synthetic transparent-liquid images by a
//! contrastive unpaired translation network, and the resulting pairs train
//! a UNet that segments real transparent liquid. A post-processing chain
//! turns masks into fill levels that drive a two-state pouring controller.
//!
//! Every stage runs on procedurally generated scenes ([`synth`]) so the
//! whole chain is testable on a CPU in minutes.

pub mod bgsub;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod pour;
pub mod segmentation;
pub mod synth;
pub mod translation;

pub use error::{Error, Result};
