//! Microvascular video analysis: capillary detection, per-capillary flow
//! estimation, and clinical summary metrics, plus a synthetic scene
//! generator for validation.
//!
//! The pipeline runs in three stages. Region proposal finds candidate
//! capillary boxes from background-model salience and short-window motion.
//! A small convolutional classifier keeps the boxes that actually contain
//! perfused vessels. Dense optical flow inside each kept box yields red
//! cell velocity, from which density, hematocrit, velocity class, and flow
//! direction are derived per capillary and per video.

pub mod classifier;
pub mod config;
pub mod error;
pub mod flow;
pub mod frame;
pub mod frameio;
pub mod imgproc;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod roi;
pub mod synth;

pub use error::{Error, Result};
pub use frame::{BinaryMask, Frame};
