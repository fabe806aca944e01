//! Algorithmic core for CSI-based fingerprint positioning.
//!
//! The crate covers the full pipeline from channel generation to position
//! estimates: a spatially consistent multipath channel simulator, a CSI
//! fingerprint database with contrastive batch construction, autocorrelation
//! preprocessing, a convolutional embedding encoder with a hand-rolled
//! training loop, hand-crafted and learned similarity metrics, and weighted
//! kNN position prediction with evaluation statistics.
//!
//! Everything here is pure computation over in-memory data. File formats,
//! persistence and the command line live in the companion `csipos` crate.
//! The crate is `no_std`-compatible (with `alloc`); disable the default
//! `std` feature for embedded use. Float math falls back to `libm` there.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod csi;
pub mod dataset;
pub mod encoder;
pub mod objective;
pub mod positioning;
pub mod preprocess;
pub mod seeds;
pub mod sim;
pub mod similarity;
pub mod train;

pub(crate) mod flt;
#[cfg(feature = "std")]
pub(crate) mod pool;

pub use csi::CsiMatrix;
pub use dataset::{CsiSample, FingerprintDatabase, Position, SplitConfig};
pub use encoder::{Embedding, EncoderConfig, EncoderParams};
pub use train::{TrainConfig, TrainReport};
