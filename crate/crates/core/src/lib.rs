//! Long-term superpixel tracking.
//!
//! Frames are decomposed into SLIC superpixels, elementary superpixel
//! matches are learned between frame pairs by training a pixel classifier
//! (random forest or kNN) on the target frame's superpixel indexes and
//! predicting on the source frame, and long-term matches against a
//! reference frame are obtained by direct, sequential or multi-step
//! integration of those elementary matches.
//!
//! Module map:
//!
//! * [`imaging`]: frames, masks, sequences and their file formats.
//! * [`slic`]: superpixel decomposition.
//! * [`features`]: context-rich multi-channel box features on integral images.
//! * [`classifiers`]: random forest and kNN pixel-to-superpixel posteriors.
//! * [`matching`]: superpixel-to-superpixel match fields.
//! * [`multistep`]: step sequences, path composition and long-term voting.
//! * [`tracking`]: DIR / SEQ / MSI pipelines and ROI propagation.
//! * [`metrics`]: DICE, contour F-measure and forward-backward consistency.

pub mod classifiers;
pub mod error;
pub mod features;
pub mod imaging;
pub mod matching;
pub mod metrics;
pub mod multistep;
pub mod rng;
pub mod slic;
pub mod tracking;

pub use error::{Error, Result};
