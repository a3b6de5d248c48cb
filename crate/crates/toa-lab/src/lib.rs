//! Time-of-arrival estimation workbench for narrowband OFDM positioning.
//!
//! The pipeline synthesizes positioning reference signals, passes them
//! through static or multipath fading channels, computes full-band and
//! per-resource-block cross-correlation feature maps, and estimates TOA
//! with either classical methods (peak detection, least-squares delay
//! search, MUSIC, ESPRIT) or a small convolutional regressor with a
//! shared feature extractor and per-environment fitting heads.

pub mod channel;
pub mod classical;
pub mod correlator;
pub mod error;
pub mod harness;
pub mod neural;
pub mod prs;

pub use error::{Result, ToaError};
