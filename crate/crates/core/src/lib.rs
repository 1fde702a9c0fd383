//! Detectors of image manipulation and counter-forensic attacks against them.
//!
//! The crate is organised bottom-up:
//!
//! * [`imaging`]: 8-bit grayscale patches, PGM I/O, synthetic "device" images,
//!   patch extraction and distortion metrics.
//! * [`manipulations`]: blur, median, resize and JPEG round-trip.
//! * [`spamfeat`]: third-order residual co-occurrence (SPAM) features with
//!   O(1) single-pixel incremental updates.
//! * [`diffnet`]: a small 64-bit sequential network engine with exact
//!   reverse-mode gradients.
//! * [`detectors`]: SPAM + linear classifier, the SPAM-equivalent CNN (hard and
//!   soft) and the constrained-first-layer CNN.
//! * [`attacks`]: FGSM, PGD, the greedy feature-space attack and a small
//!   residual restoration network.
//! * [`harness`]: experiment configuration, device-disjoint splits, metrics,
//!   transferability matrices and reports.

pub mod attacks;
pub mod detectors;
pub mod diffnet;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod manipulations;
pub mod rng;
pub mod spamfeat;

pub use error::{Error, Result};
pub use imaging::ImagePatch;
